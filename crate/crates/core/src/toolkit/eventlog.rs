//! Compiled event logs.
//!
//! A log is the merged, ordered event stream of a whole trace, written once
//! so later runs skip CSV parsing. Layout, all integers little-endian:
//!
//! ```text
//! "TSIMEVLG" | u32 version | 32-byte source trace digest | u64 event count
//! count x ( u32 length | JSON SequencedEvent )
//! u32 length | JSON parse anomaly report
//! 32-byte SHA-256 over records, trailer, source digest and count
//! ```
//!
//! Replaying a log through the engine gives the same batches as running the
//! trace directly, so snapshots and stats match byte for byte.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use log::info;
use thiserror::Error;

use crate::digest::{Digest, Hasher};
use crate::model::SimTime;
use crate::parser::{trace_digest, AnomalyReport, SharedReport};
use crate::pipeline::{EventSource, Pipeline, PipelineConfig, PipelineError, SequencedEvent};

pub const LOG_MAGIC: &[u8; 8] = b"TSIMEVLG";
pub const LOG_VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 4 + 32 + 8;
const COUNT_OFFSET: u64 = 8 + 4 + 32;
/// Drain window used while compiling.
const COMPILE_WINDOW_MICROS: u64 = 3_600_000_000;
const MAX_RECORD_BYTES: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("not an event log")]
    BadMagic,
    #[error("unsupported event log version {0}")]
    UnsupportedVersion(u32),
    #[error("event log is truncated")]
    TruncatedLog,
    #[error("event log digest mismatch")]
    DigestMismatch,
    #[error("event log was compiled from trace {found}, expected {expected}")]
    SourceMismatch { expected: Digest, found: Digest },
    #[error("malformed record {index}: {message}")]
    Malformed { index: u64, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// What a compile or verify pass found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogSummary {
    pub events: u64,
    pub source_digest: Digest,
    /// The trailing SHA-256 of the log.
    pub log_digest: Digest,
    pub parse_anomalies: AnomalyReport,
}

fn write_frame(w: &mut impl Write, hasher: &mut Hasher, bytes: &[u8]) -> io::Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "record too large"))?;
    let len = len.to_le_bytes();
    hasher.update(&len);
    hasher.update(bytes);
    w.write_all(&len)?;
    w.write_all(bytes)
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<(), EventLogError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EventLogError::TruncatedLog,
        _ => EventLogError::Io(e),
    })
}

fn read_frame(r: &mut impl Read, hasher: &mut Hasher, buf: &mut Vec<u8>) -> Result<(), EventLogError> {
    let mut len = [0u8; 4];
    read_exact_or_truncated(r, &mut len)?;
    let n = u32::from_le_bytes(len);
    if n > MAX_RECORD_BYTES {
        return Err(EventLogError::TruncatedLog);
    }
    buf.resize(n as usize, 0);
    read_exact_or_truncated(r, buf)?;
    hasher.update(&len);
    hasher.update(buf);
    Ok(())
}

/// Parses every table under `root` and writes the merged event stream to
/// `out`. The file appears under its final name only once complete.
pub fn compile_trace(root: &Path, out: &Path, config: PipelineConfig) -> Result<LogSummary, EventLogError> {
    let source_digest = trace_digest(root)?;
    let mut pipeline = Pipeline::from_trace_root(root, config, SimTime::ZERO)?;
    let tmp = tmp_path(out);
    let mut w = BufWriter::with_capacity(1 << 20, File::create(&tmp)?);
    w.write_all(LOG_MAGIC)?;
    w.write_all(&LOG_VERSION.to_le_bytes())?;
    w.write_all(&source_digest.0)?;
    w.write_all(&0u64.to_le_bytes())?;
    let mut hasher = Hasher::new();
    let mut count = 0u64;
    let mut upto = SimTime::ZERO;
    loop {
        let batch = pipeline.drain_until(upto)?;
        for e in &batch.events {
            let json = serde_json::to_vec(e).expect("events serialize");
            write_frame(&mut w, &mut hasher, &json)?;
        }
        count += batch.len() as u64;
        if batch.exhausted {
            break;
        }
        upto = upto.saturating_add(COMPILE_WINDOW_MICROS);
    }
    let parse_anomalies = pipeline.parse_anomalies();
    drop(pipeline);
    let trailer = serde_json::to_vec(&parse_anomalies).expect("report serializes");
    write_frame(&mut w, &mut hasher, &trailer)?;
    hasher.update(&source_digest.0);
    hasher.update(&count.to_le_bytes());
    let log_digest = hasher.finish();
    w.write_all(&log_digest.0)?;
    let mut f = w.into_inner().map_err(|e| e.into_error())?;
    f.seek(SeekFrom::Start(COUNT_OFFSET))?;
    f.write_all(&count.to_le_bytes())?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, out)?;
    info!("compiled {count} events into {}", out.display());
    Ok(LogSummary {
        events: count,
        source_digest,
        log_digest,
        parse_anomalies,
    })
}

fn tmp_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    out.with_file_name(name)
}

struct Header {
    source_digest: Digest,
    count: u64,
}

fn read_header(r: &mut impl Read) -> Result<Header, EventLogError> {
    let mut magic = [0u8; 8];
    read_exact_or_truncated(r, &mut magic).map_err(|e| match e {
        EventLogError::TruncatedLog => EventLogError::BadMagic,
        other => other,
    })?;
    if &magic != LOG_MAGIC {
        return Err(EventLogError::BadMagic);
    }
    let mut v = [0u8; 4];
    read_exact_or_truncated(r, &mut v)?;
    let version = u32::from_le_bytes(v);
    if version != LOG_VERSION {
        return Err(EventLogError::UnsupportedVersion(version));
    }
    let mut d = [0u8; 32];
    read_exact_or_truncated(r, &mut d)?;
    let mut c = [0u8; 8];
    read_exact_or_truncated(r, &mut c)?;
    Ok(Header {
        source_digest: Digest(d),
        count: u64::from_le_bytes(c),
    })
}

/// A verified event log on disk.
#[derive(Debug, Clone)]
pub struct EventLog {
    path: PathBuf,
    summary: LogSummary,
}

impl EventLog {
    /// Reads the whole file and checks its structure and digest. With
    /// `expected_source`, also checks which trace it was compiled from.
    pub fn open(path: &Path, expected_source: Option<Digest>) -> Result<Self, EventLogError> {
        let mut r = BufReader::with_capacity(1 << 20, File::open(path)?);
        let header = read_header(&mut r)?;
        if let Some(expected) = expected_source {
            if expected != header.source_digest {
                return Err(EventLogError::SourceMismatch {
                    expected,
                    found: header.source_digest,
                });
            }
        }
        let mut hasher = Hasher::new();
        let mut buf = Vec::new();
        for _ in 0..header.count {
            read_frame(&mut r, &mut hasher, &mut buf)?;
        }
        read_frame(&mut r, &mut hasher, &mut buf)?;
        let trailer = buf.clone();
        hasher.update(&header.source_digest.0);
        hasher.update(&header.count.to_le_bytes());
        let computed = hasher.finish();
        let mut stored = [0u8; 32];
        read_exact_or_truncated(&mut r, &mut stored)?;
        if Digest(stored) != computed {
            return Err(EventLogError::DigestMismatch);
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(EventLogError::DigestMismatch);
        }
        let parse_anomalies = serde_json::from_slice(&trailer).map_err(|e| EventLogError::Malformed {
            index: header.count,
            message: e.to_string(),
        })?;
        Ok(EventLog {
            path: path.to_owned(),
            summary: LogSummary {
                events: header.count,
                source_digest: header.source_digest,
                log_digest: computed,
                parse_anomalies,
            },
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn summary(&self) -> &LogSummary {
        &self.summary
    }

    /// A fresh source streaming the log's events from the start.
    pub fn source(&self) -> Result<LogSource, EventLogError> {
        LogSource::open(self)
    }
}

/// Streams events from a verified log. Its anomaly report starts out with
/// the parse anomalies recorded at compile time.
pub struct LogSource {
    name: String,
    reader: BufReader<File>,
    remaining: u64,
    index: u64,
    buf: Vec<u8>,
    report: SharedReport,
}

impl LogSource {
    fn open(log: &EventLog) -> Result<Self, EventLogError> {
        let mut reader = BufReader::with_capacity(1 << 20, File::open(&log.path)?);
        reader.seek(SeekFrom::Start(HEADER_LEN))?;
        let report = SharedReport::default();
        *report.lock().expect("anomaly report poisoned") = log.summary.parse_anomalies.clone();
        Ok(LogSource {
            name: format!("log:{}", log.path.display()),
            reader,
            remaining: log.summary.events,
            index: 0,
            buf: Vec::new(),
            report,
        })
    }
}

impl EventSource for LogSource {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn next_event(&mut self) -> Result<Option<SequencedEvent>, PipelineError> {
        if self.remaining == 0 {
            return Ok(None);
        }
        let fail = |message: String| PipelineError::Source {
            source_name: self.name.clone(),
            message,
        };
        let mut discard = Hasher::new();
        read_frame(&mut self.reader, &mut discard, &mut self.buf).map_err(|e| fail(e.to_string()))?;
        let event = serde_json::from_slice(&self.buf)
            .map_err(|e| fail(format!("record {}: {e}", self.index)))?;
        self.remaining -= 1;
        self.index += 1;
        Ok(Some(event))
    }

    fn report(&self) -> SharedReport {
        self.report.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolkit::generator::{generate_trace, SyntheticSpec};

    fn tiny_trace(dir: &Path) {
        let spec = SyntheticSpec {
            nodes: 5,
            tasks: 20,
            duration_micros: 3600 * 1_000_000,
            anomaly_rate: 0.05,
            ..Default::default()
        };
        generate_trace(&spec, dir).unwrap();
    }

    #[test]
    fn compile_verify_stream() {
        let dir = tempfile::tempdir().unwrap();
        tiny_trace(dir.path());
        let out = dir.path().join("trace.evlog");
        let summary = compile_trace(dir.path(), &out, PipelineConfig::default()).unwrap();
        assert!(summary.events > 0);
        let log = EventLog::open(&out, Some(summary.source_digest)).unwrap();
        assert_eq!(log.summary(), &summary);
        let mut src = log.source().unwrap();
        let mut n = 0u64;
        let mut prev = None;
        while let Some(e) = src.next_event().unwrap() {
            assert!(prev.is_none_or(|p| p <= e.key));
            prev = Some(e.key);
            n += 1;
        }
        assert_eq!(n, summary.events);
        assert_eq!(*src.report().lock().unwrap(), summary.parse_anomalies);
    }

    #[test]
    fn damage_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_trace(dir.path());
        let out = dir.path().join("trace.evlog");
        compile_trace(dir.path(), &out, PipelineConfig::default()).unwrap();
        let bytes = fs::read(&out).unwrap();

        let cut = dir.path().join("cut.evlog");
        fs::write(&cut, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(EventLog::open(&cut, None), Err(EventLogError::TruncatedLog)));

        let mut flipped = bytes.clone();
        flipped[HEADER_LEN as usize + 10] ^= 1;
        let bad = dir.path().join("bad.evlog");
        fs::write(&bad, &flipped).unwrap();
        assert!(matches!(
            EventLog::open(&bad, None),
            Err(EventLogError::DigestMismatch | EventLogError::TruncatedLog)
        ));

        assert!(matches!(
            EventLog::open(&out, Some(Digest::of(b"other"))),
            Err(EventLogError::SourceMismatch { .. })
        ));
        let mut v2 = bytes;
        v2[8] = 2;
        fs::write(&bad, &v2).unwrap();
        assert!(matches!(EventLog::open(&bad, None), Err(EventLogError::UnsupportedVersion(2))));
    }
}
