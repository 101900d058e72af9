use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;

use crate::digest::{Digest, Hasher};
use crate::pipeline::{EventSource, OrderKey, PipelineError, SequencedEvent};

use super::records::{has_absent_resources, parse_and_decode};
use super::{map_to_events, AnomalyClass, SharedReport, SourcePos, TraceTable};

const READ_BUFFER: usize = 256 * 1024;

/// Part files of one table, in lexicographic order. A missing table
/// directory is an empty table.
pub fn list_table_files(root: &Path, table: TraceTable) -> io::Result<Vec<PathBuf>> {
    let dir = root.join(table.dir_name());
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with(".csv") || n.ends_with(".csv.gz"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Identity of a trace root: table, file name and length of every part file.
pub fn trace_digest(root: &Path) -> io::Result<Digest> {
    let mut h = Hasher::new();
    for table in TraceTable::ALL {
        for path in list_table_files(root, table)? {
            let len = fs::metadata(&path)?.len();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            h.update(format!("{}/{}\0{}\n", table.dir_name(), name, len).as_bytes());
        }
    }
    Ok(h.finish())
}

/// Streams one table's part files as ordered workload events.
pub struct TableSource {
    table: TraceTable,
    files: Vec<PathBuf>,
    next_file: usize,
    current: Option<Box<dyn BufRead + Send>>,
    file_idx: u32,
    line_no: u64,
    line: Vec<u8>,
    queue: VecDeque<SequencedEvent>,
    report: SharedReport,
}

impl TableSource {
    pub fn open(root: &Path, table: TraceTable, report: SharedReport) -> io::Result<Self> {
        Ok(Self::from_files(table, list_table_files(root, table)?, report))
    }

    pub fn from_files(table: TraceTable, files: Vec<PathBuf>, report: SharedReport) -> Self {
        TableSource {
            table,
            files,
            next_file: 0,
            current: None,
            file_idx: 0,
            line_no: 0,
            line: Vec::with_capacity(512),
            queue: VecDeque::new(),
            report,
        }
    }

    pub fn table(&self) -> TraceTable {
        self.table
    }

    fn open_next(&mut self) -> io::Result<bool> {
        let Some(path) = self.files.get(self.next_file) else {
            return Ok(false);
        };
        let file = File::open(path)?;
        let reader: Box<dyn BufRead + Send> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(BufReader::with_capacity(READ_BUFFER, MultiGzDecoder::new(file)))
        } else {
            Box::new(BufReader::with_capacity(READ_BUFFER, file))
        };
        self.current = Some(reader);
        self.file_idx = self.next_file as u32;
        self.next_file += 1;
        self.line_no = 0;
        Ok(true)
    }

    fn anomaly(&self, class: AnomalyClass, pos: SourcePos) {
        self.report
            .lock()
            .expect("anomaly report poisoned")
            .record(class, Some(pos));
    }

    fn handle_line(&mut self, pos: SourcePos) {
        let Ok(text) = std::str::from_utf8(&self.line) else {
            self.anomaly(AnomalyClass::BadFieldFormat, pos);
            return;
        };
        let rec = match parse_and_decode(self.table, text, pos) {
            Ok(rec) => rec,
            Err(class) => {
                self.anomaly(class, pos);
                return;
            }
        };
        if has_absent_resources(&rec) {
            self.anomaly(AnomalyClass::MissingField, pos);
        }
        let entity = rec.entity();
        for (sub, event) in map_to_events(&rec).into_iter().enumerate() {
            let key = OrderKey {
                time: event.timestamp,
                table: self.table,
                entity,
                file: pos.file,
                line: pos.line,
                sub: sub as u8,
            };
            self.queue.push_back(SequencedEvent { key, event });
        }
    }
}

impl EventSource for TableSource {
    fn name(&self) -> String {
        self.table.dir_name().to_owned()
    }

    fn next_event(&mut self) -> Result<Option<SequencedEvent>, PipelineError> {
        loop {
            if let Some(e) = self.queue.pop_front() {
                return Ok(Some(e));
            }
            if self.current.is_none() && !self.open_next().map_err(|e| self.io_error(e))? {
                return Ok(None);
            }
            self.line.clear();
            let reader = self.current.as_mut().expect("reader just opened");
            let n = match reader.read_until(b'\n', &mut self.line) {
                Ok(n) => n,
                Err(e) => return Err(self.io_error(e)),
            };
            if n == 0 {
                self.current = None;
                continue;
            }
            self.line_no += 1;
            let pos = SourcePos::new(self.table, self.file_idx, self.line_no);
            self.handle_line(pos);
        }
    }

    fn report(&self) -> SharedReport {
        self.report.clone()
    }
}

impl TableSource {
    fn io_error(&self, e: io::Error) -> PipelineError {
        let file = self
            .files
            .get(self.next_file.saturating_sub(1))
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        PipelineError::Source {
            source_name: self.name(),
            message: format!("{file}: {e}"),
        }
    }
}
