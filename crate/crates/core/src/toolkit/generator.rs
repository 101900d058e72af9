//! Seeded synthetic traces in the GCD layout.
//!
//! Tasks follow the GCD lifecycle: SUBMIT, optional UPDATE_PENDING, SCHEDULE,
//! optional UPDATE_RUNNING, then one terminal action (or none when the task
//! outlives the trace). Evicted, failed and lost tasks are sometimes
//! resubmitted under the same id. Running tasks report usage every 300 s on
//! aligned windows, far below what they requested.
//!
//! Usage rows are streamed window by window, so memory stays proportional to
//! the number of tasks rather than the number of samples.
//!
//! With a non-zero anomaly rate, extra corrupt lines are injected. Each one
//! is built to trigger exactly one anomaly count and to leave the rest of the
//! trace unaffected, so the manifest's `injected` counts are exactly what a
//! full run must report.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{Digest, Hasher};
use crate::model::{
    ConstraintOp, MachineId, NodeCapacity, RequestedResources, SimTime, TaskConstraint, TaskId,
    UsageSample,
};
use crate::parser::{
    AnomalyClass, DecodedRecord, JobEventRecord, MachineAttributeRecord, MachineEventKind,
    MachineEventRecord, TaskAction, TaskConstraintRecord, TaskEventRecord, TraceTable, UsageRecord,
};

const SECOND: u64 = 1_000_000;
const DAY: u64 = 86_400 * SECOND;
const FIRST_JOB_ID: u64 = 6_000_000_000;
const FIRST_MACHINE_ID: u64 = 100_000;
const ORPHAN_JOB_ID: u64 = 9_000_000_000;
const GHOST_MACHINE_ID: u64 = 8_000_000_000;
/// Disk I/O counters are absent from usage rows after this point, as in the
/// published trace.
const DISK_IO_CUTOFF: u64 = 14 * DAY;

/// The injected classes, in round-robin order.
pub const INJECTED_CLASSES: [AnomalyClass; 7] = [
    AnomalyClass::MissingField,
    AnomalyClass::SchemaMismatch,
    AnomalyClass::BadFieldFormat,
    AnomalyClass::UsageForNonexistentTask,
    AnomalyClass::UnknownTask,
    AnomalyClass::CorruptTaskState,
    AnomalyClass::UnknownNode,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub nodes: usize,
    /// Distinct tasks submitted over the whole trace.
    pub tasks: usize,
    pub duration_micros: u64,
    pub seed: u64,
    /// Injected corrupt lines as a fraction of clean records.
    pub anomaly_rate: f64,
    /// Categorical weights over priorities 0..=11.
    pub priority_weights: Vec<(u8, f64)>,
    /// Probability that a task carries placement constraints.
    pub constraint_probability: f64,
    /// Fraction of tasks that are long-running services submitted near the
    /// start and never finishing within the trace.
    pub service_fraction: f64,
    /// Fraction of machines that get one capacity update.
    pub machine_update_fraction: f64,
    /// Machines removed mid-trace. Their running tasks are displaced, so
    /// later events for those tasks show up as anomalies.
    pub machine_removals: usize,
    pub usage_interval_micros: u64,
    pub records_per_part: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            nodes: 500,
            tasks: 5500,
            duration_micros: 6 * 3600 * SECOND,
            seed: 1,
            anomaly_rate: 0.0,
            priority_weights: vec![(0, 30.0), (1, 10.0), (2, 10.0), (4, 25.0), (9, 20.0), (10, 3.0), (11, 2.0)],
            constraint_probability: 0.1,
            service_fraction: 0.2,
            machine_update_fraction: 0.05,
            machine_removals: 0,
            usage_interval_micros: 300 * SECOND,
            records_per_part: 250_000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: &str| Err(GenerateError::InvalidSpec(m.to_owned()));
        if self.nodes == 0 {
            return bad("nodes must be at least 1");
        }
        if self.duration_micros < 60 * SECOND {
            return bad("duration must be at least one minute");
        }
        if !(0.0..1.0).contains(&self.anomaly_rate) {
            return bad("anomaly_rate must be in [0, 1)");
        }
        if self.priority_weights.is_empty()
            || self.priority_weights.iter().any(|(p, w)| *p > 11 || !(*w >= 0.0))
            || self.priority_weights.iter().all(|(_, w)| *w == 0.0)
        {
            return bad("priority weights must cover priorities 0..=11 with non-negative weights");
        }
        for (name, p) in [
            ("constraint_probability", self.constraint_probability),
            ("service_fraction", self.service_fraction),
            ("machine_update_fraction", self.machine_update_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if self.machine_removals > self.nodes {
            return bad("cannot remove more machines than exist");
        }
        if self.usage_interval_micros == 0 || self.records_per_part == 0 {
            return bad("usage interval and records per part must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    /// Path relative to the trace root.
    pub path: String,
    pub bytes: u64,
    pub sha256: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub spec: SyntheticSpec,
    pub files: Vec<ManifestFile>,
    /// Clean records per table.
    pub records: BTreeMap<TraceTable, u64>,
    pub injected: BTreeMap<AnomalyClass, u64>,
    pub task_runs: u64,
}

impl TraceManifest {
    pub fn clean_records(&self) -> u64 {
        self.records.values().sum()
    }

    pub fn injected_total(&self) -> u64 {
        self.injected.values().sum()
    }

    pub fn injected(&self, class: AnomalyClass) -> u64 {
        self.injected.get(&class).copied().unwrap_or(0)
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        let text = fs::read(path)?;
        serde_json::from_slice(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Machine {
    id: MachineId,
    platform: String,
    capacity: NodeCapacity,
    attributes: Vec<(String, String)>,
}

#[derive(Clone)]
struct Run {
    submit: u64,
    update_pending: Option<u64>,
    schedule: u64,
    update_running: Option<(u64, RequestedResources)>,
    /// Terminal action, absent when the task outlives the trace.
    end: Option<(u64, TaskAction)>,
    machine: MachineId,
}

struct TaskPlan {
    id: TaskId,
    priority: u8,
    class: u8,
    user: String,
    requested: RequestedResources,
    constraints: Vec<TaskConstraint>,
    cpu_use: f64,
    mem_use: f64,
    runs: Vec<Run>,
}

/// A line for one of the small tables, sortable by time and insertion order.
struct Line {
    ts: u64,
    seq: u64,
    text: String,
}

const ATTRIBUTE_NAMES: [&str; 5] = ["arch", "kernel", "rack", "ssd", "zone"];
const PLATFORMS: [&str; 3] = [
    "HofLGzk1Or/8Ildj2+Lqv0UGGvY82NLoni8+J/Yy0RU=",
    "70ZOvysYGtB6j9MUHMPzA2Iy7GRzWeJTdX0YCLRKGVg=",
    "GtXakjpd0CD41nPdRbM7qSVZBOqiACtRVwBDoMOyDOM=",
];
const CPU_SIZES: [f64; 3] = [0.25, 0.5, 1.0];
const MEM_SIZES: [f64; 4] = [0.1241, 0.2493, 0.4995, 0.749];
const CPU_REQUESTS: [f64; 6] = [0.00625, 0.0125, 0.01875, 0.025, 0.03125, 0.0625];
const MEM_REQUESTS: [f64; 5] = [0.0011, 0.0031, 0.0062, 0.0124, 0.0249];

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn gen_machines(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Machine> {
    (0..spec.nodes)
        .map(|i| {
            let shape = rng.gen_range(0..CPU_SIZES.len());
            let attributes = vec![
                ("arch".to_owned(), if rng.gen_bool(0.8) { "x86" } else { "arm" }.to_owned()),
                ("kernel".to_owned(), format!("{}", rng.gen_range(3..7))),
                ("rack".to_owned(), format!("{}", rng.gen_range(0..40))),
                ("ssd".to_owned(), if rng.gen_bool(0.3) { "1" } else { "0" }.to_owned()),
                ("zone".to_owned(), format!("z{}", rng.gen_range(0..4))),
            ];
            Machine {
                id: MachineId(FIRST_MACHINE_ID + i as u64),
                platform: PLATFORMS[shape].to_owned(),
                capacity: NodeCapacity::new(CPU_SIZES[shape], MEM_SIZES[rng.gen_range(shape..MEM_SIZES.len())]),
                attributes,
            }
        })
        .collect()
}

/// A constraint that at least one machine satisfies.
fn gen_constraint(machines: &[Machine], rng: &mut ChaCha8Rng) -> TaskConstraint {
    let m = &machines[rng.gen_range(0..machines.len())];
    let (name, value) = &m.attributes[rng.gen_range(0..m.attributes.len())];
    match name.as_str() {
        "rack" | "kernel" => {
            let v: i64 = value.parse().expect("numeric attribute");
            if rng.gen_bool(0.5) {
                TaskConstraint::new(name.clone(), ConstraintOp::Gt, (v - 1).to_string())
            } else {
                TaskConstraint::new(name.clone(), ConstraintOp::Lt, (v + 1).to_string())
            }
        }
        "zone" => TaskConstraint::new(name.clone(), ConstraintOp::Neq, format!("z{}", rng.gen_range(4..6))),
        _ => TaskConstraint::new(name.clone(), ConstraintOp::Eq, value.clone()),
    }
}

fn gen_run(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    submit: u64,
    service: bool,
    requested: RequestedResources,
    machines: &[Machine],
) -> Run {
    let schedule = submit + rng.gen_range(1..30 * SECOND);
    let update_pending = (schedule - submit >= 2 && rng.gen_bool(0.05)).then(|| submit + (schedule - submit) / 2);
    let len = if service {
        spec.duration_micros * 2
    } else {
        log_uniform(rng, 60.0, 6.0 * 3600.0) as u64 * SECOND + rng.gen_range(0..SECOND)
    };
    let end_ts = schedule.saturating_add(len);
    let update_running = (rng.gen_bool(0.1) && len >= 2).then(|| {
        let mut r = requested;
        r.cpu = r.cpu.map(|c| round6(c * rng.gen_range(0.5..1.5)));
        (schedule + len / 2, r)
    });
    let end = (end_ts < spec.duration_micros).then(|| {
        let action = match rng.gen_range(0..100) {
            0..=59 => TaskAction::Finish,
            60..=84 => TaskAction::Kill,
            85..=92 => TaskAction::Fail,
            93..=97 => TaskAction::Evict,
            _ => TaskAction::Lost,
        };
        (end_ts, action)
    });
    let update_running = update_running.filter(|(t, _)| end.is_none_or(|(e, _)| *t < e) && *t < spec.duration_micros);
    Run {
        submit,
        update_pending,
        schedule,
        update_running,
        end,
        machine: machines[rng.gen_range(0..machines.len())].id,
    }
}

fn gen_tasks(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, machines: &[Machine]) -> Vec<TaskPlan> {
    let weights = WeightedIndex::new(spec.priority_weights.iter().map(|(_, w)| *w)).expect("validated weights");
    let service_window = (spec.duration_micros / 10).clamp(SECOND, 600 * SECOND);
    let mut tasks = Vec::with_capacity(spec.tasks);
    let mut job = FIRST_JOB_ID;
    while tasks.len() < spec.tasks {
        let size = rng.gen_range(1..=8usize).min(spec.tasks - tasks.len());
        let service = rng.gen_bool(spec.service_fraction);
        let base_submit = if service {
            rng.gen_range(0..service_window)
        } else {
            rng.gen_range(0..spec.duration_micros * 9 / 10)
        };
        let priority = spec.priority_weights[weights.sample(rng)].0;
        let class = rng.gen_range(0..4u8);
        let user = format!("u{}", rng.gen_range(0..64));
        for index in 0..size as u64 {
            let requested = RequestedResources::new(
                *CPU_REQUESTS.choose(rng).expect("non-empty"),
                *MEM_REQUESTS.choose(rng).expect("non-empty"),
                round6(rng.gen_range(0.0001..0.001)),
            );
            let constraints = if rng.gen_bool(spec.constraint_probability) {
                (0..rng.gen_range(1..=3)).map(|_| gen_constraint(machines, rng)).collect()
            } else {
                Vec::new()
            };
            let submit = base_submit + rng.gen_range(0..SECOND);
            let mut runs = vec![gen_run(spec, rng, submit, service, requested, machines)];
            // evicted, failed or lost tasks may come back under the same id
            while let Some((end, action)) = runs.last().expect("one run").end {
                let retry = matches!(action, TaskAction::Evict | TaskAction::Fail | TaskAction::Lost)
                    && rng.gen_bool(0.7);
                let resubmit = end + rng.gen_range(SECOND..60 * SECOND);
                if !retry || resubmit >= spec.duration_micros {
                    break;
                }
                runs.push(gen_run(spec, rng, resubmit, false, requested, machines));
            }
            tasks.push(TaskPlan {
                id: TaskId::new(job, index),
                priority,
                class,
                user: user.clone(),
                requested,
                constraints,
                cpu_use: rng.gen_range(0.02..0.4),
                mem_use: rng.gen_range(0.1..0.6),
                runs,
            });
        }
        job += 1 + rng.gen_range(0..3);
    }
    tasks
}

fn task_line(t: &TaskPlan, ts: u64, action: TaskAction, machine: Option<MachineId>, req: RequestedResources) -> String {
    DecodedRecord::TaskEvent(TaskEventRecord {
        timestamp: SimTime(ts),
        missing_info: None,
        task: t.id,
        machine,
        action,
        user: Some(t.user.clone()),
        scheduling_class: t.class,
        priority: t.priority,
        requested: req,
        different_machines: Some(false),
    })
    .encode()
}

/// Windows `[k*iv, (k+1)*iv)` whose start lies in `[schedule, end)`.
fn usage_windows(run: &Run, iv: u64, duration: u64) -> (u64, u64) {
    let end = run.end.map_or(duration, |(e, _)| e.min(duration));
    let first = run.schedule.div_ceil(iv);
    let last_excl = end.div_ceil(iv);
    (first, last_excl.max(first))
}

/// Streams gzip part files for one table.
struct PartWriter {
    dir: PathBuf,
    per_part: usize,
    in_part: usize,
    current: Option<GzEncoder<HashingWriter<BufWriter<File>>>>,
    finished: Vec<(PathBuf, u64, Digest)>,
}

struct HashingWriter<W> {
    inner: W,
    hasher: Hasher,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

impl PartWriter {
    fn new(root: &Path, table: TraceTable, per_part: usize) -> io::Result<Self> {
        let dir = root.join(table.dir_name());
        fs::create_dir_all(&dir)?;
        Ok(PartWriter {
            dir,
            per_part,
            in_part: 0,
            current: None,
            finished: Vec::new(),
        })
    }

    fn tmp_path(&self, i: usize) -> PathBuf {
        self.dir.join(format!(".part-{i:05}.tmp"))
    }

    fn write_line(&mut self, line: &str) -> io::Result<()> {
        if self.current.is_none() || self.in_part == self.per_part {
            self.close_part()?;
            let f = File::create(self.tmp_path(self.finished.len()))?;
            let hw = HashingWriter {
                inner: BufWriter::with_capacity(1 << 20, f),
                hasher: Hasher::new(),
                bytes: 0,
            };
            self.current = Some(GzEncoder::new(hw, Compression::fast()));
            self.in_part = 0;
        }
        let enc = self.current.as_mut().expect("part open");
        enc.write_all(line.as_bytes())?;
        enc.write_all(b"\n")?;
        self.in_part += 1;
        Ok(())
    }

    fn close_part(&mut self) -> io::Result<()> {
        if let Some(enc) = self.current.take() {
            let mut hw = enc.finish()?;
            hw.flush()?;
            let path = self.tmp_path(self.finished.len());
            self.finished.push((path, hw.bytes, hw.hasher.finish()));
        }
        Ok(())
    }

    /// Renames parts to `part-NNNNN-of-MMMMM.csv.gz`. A table without rows
    /// still gets one empty part.
    fn finish(mut self, root: &Path) -> io::Result<Vec<ManifestFile>> {
        self.close_part()?;
        if self.finished.is_empty() {
            let f = File::create(self.tmp_path(0))?;
            let mut hw = HashingWriter {
                inner: BufWriter::new(f),
                hasher: Hasher::new(),
                bytes: 0,
            };
            let enc = GzEncoder::new(&mut hw, Compression::fast());
            enc.finish()?;
            hw.flush()?;
            let path = self.tmp_path(0);
            self.finished.push((path, hw.bytes, hw.hasher.finish()));
        }
        let n = self.finished.len();
        let mut out = Vec::with_capacity(n);
        for (i, (tmp, bytes, sha256)) in self.finished.into_iter().enumerate() {
            let name = format!("part-{i:05}-of-{n:05}.csv.gz");
            let dest = self.dir.join(&name);
            fs::rename(&tmp, &dest)?;
            let rel = dest.strip_prefix(root).unwrap_or(&dest).to_string_lossy().replace('\\', "/");
            out.push(ManifestFile { path: rel, bytes, sha256 });
        }
        Ok(out)
    }
}

fn write_lines(root: &Path, table: TraceTable, per_part: usize, mut lines: Vec<Line>) -> io::Result<Vec<ManifestFile>> {
    lines.sort_by_key(|l| (l.ts, l.seq));
    let mut w = PartWriter::new(root, table, per_part)?;
    for l in &lines {
        w.write_line(&l.text)?;
    }
    w.finish(root)
}

/// How many injections of each class.
fn injection_counts(spec: &SyntheticSpec, clean: u64) -> BTreeMap<AnomalyClass, u64> {
    let k = (spec.anomaly_rate * clean as f64).round() as u64;
    let n = INJECTED_CLASSES.len() as u64;
    INJECTED_CLASSES
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, k / n + u64::from((i as u64) < k % n)))
        .collect()
}

fn drop_last_field(line: &str) -> String {
    match line.rfind(',') {
        Some(i) => line[..i].to_owned(),
        None => String::new(),
    }
}

fn replace_field(line: &str, idx: usize, value: &str) -> String {
    line.split(',')
        .enumerate()
        .map(|(i, f)| if i == idx { value } else { f })
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes a synthetic trace under `out_dir` and returns its manifest, which
/// is also saved as `manifest.json` next to the table directories.
pub fn generate_trace(spec: &SyntheticSpec, out_dir: &Path) -> Result<TraceManifest, GenerateError> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let machines = gen_machines(spec, &mut rng);
    let tasks = gen_tasks(spec, &mut rng, &machines);
    let iv = spec.usage_interval_micros;
    let dur = spec.duration_micros;

    let mut seq = 0u64;
    let mut next_seq = || {
        seq += 2;
        seq
    };

    // machine tables
    let mut machine_lines = Vec::new();
    let mut attribute_lines = Vec::new();
    for m in &machines {
        let add = DecodedRecord::MachineEvent(MachineEventRecord {
            timestamp: SimTime::ZERO,
            machine: m.id,
            kind: MachineEventKind::Add,
            platform_id: Some(m.platform.clone()),
            capacity: m.capacity,
        });
        machine_lines.push(Line { ts: 0, seq: next_seq(), text: add.encode() });
        for (name, value) in &m.attributes {
            let rec = DecodedRecord::MachineAttribute(MachineAttributeRecord {
                timestamp: SimTime::ZERO,
                machine: m.id,
                name: name.clone(),
                value: Some(value.clone()),
                deleted: false,
            });
            attribute_lines.push(Line { ts: 0, seq: next_seq(), text: rec.encode() });
        }
    }
    let updates = (spec.nodes as f64 * spec.machine_update_fraction).round() as usize;
    let mut order: Vec<usize> = (0..machines.len()).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(updates) {
        let m = &machines[i];
        let ts = rng.gen_range(1..dur);
        let mut cap = m.capacity;
        cap.memory = cap.memory.map(|v| round6(v * 0.5));
        let rec = DecodedRecord::MachineEvent(MachineEventRecord {
            timestamp: SimTime(ts),
            machine: m.id,
            kind: MachineEventKind::Update,
            platform_id: Some(m.platform.clone()),
            capacity: cap,
        });
        machine_lines.push(Line { ts, seq: next_seq(), text: rec.encode() });
    }
    for &i in order.iter().rev().take(spec.machine_removals) {
        let m = &machines[i];
        let ts = rng.gen_range(dur / 4..dur / 2 + 1);
        let rec = DecodedRecord::MachineEvent(MachineEventRecord {
            timestamp: SimTime(ts),
            machine: m.id,
            kind: MachineEventKind::Remove,
            platform_id: None,
            capacity: NodeCapacity::default(),
        });
        machine_lines.push(Line { ts, seq: next_seq(), text: rec.encode() });
        let back = ts + rng.gen_range(60 * SECOND..3600 * SECOND);
        if back < dur {
            let rec = DecodedRecord::MachineEvent(MachineEventRecord {
                timestamp: SimTime(back),
                machine: m.id,
                kind: MachineEventKind::Add,
                platform_id: Some(m.platform.clone()),
                capacity: m.capacity,
            });
            machine_lines.push(Line { ts: back, seq: next_seq(), text: rec.encode() });
        }
    }

    // task, constraint and job tables
    let mut task_lines: Vec<Line> = Vec::new();
    let mut constraint_lines = Vec::new();
    let mut job_lines = Vec::new();
    let mut terminal_idx = Vec::new();
    let mut live_intervals = Vec::new();
    let mut usage_rows = 0u64;
    let mut job_span: BTreeMap<u64, (u64, Option<u64>, &TaskPlan)> = BTreeMap::new();
    for t in &tasks {
        for run in &t.runs {
            task_lines.push(Line {
                ts: run.submit,
                seq: next_seq(),
                text: task_line(t, run.submit, TaskAction::Submit, None, t.requested),
            });
            for c in &t.constraints {
                let rec = DecodedRecord::TaskConstraint(TaskConstraintRecord {
                    timestamp: SimTime(run.submit),
                    task: t.id,
                    constraint: c.clone(),
                    value_absent: false,
                });
                constraint_lines.push(Line { ts: run.submit, seq: next_seq(), text: rec.encode() });
            }
            if let Some(ts) = run.update_pending {
                let mut r = t.requested;
                r.memory = r.memory.map(|m| round6(m * 1.25));
                task_lines.push(Line {
                    ts,
                    seq: next_seq(),
                    text: task_line(t, ts, TaskAction::UpdatePending, None, r),
                });
            }
            if run.schedule < dur {
                task_lines.push(Line {
                    ts: run.schedule,
                    seq: next_seq(),
                    text: task_line(t, run.schedule, TaskAction::Schedule, Some(run.machine), t.requested),
                });
            }
            if let Some((ts, r)) = run.update_running {
                task_lines.push(Line {
                    ts,
                    seq: next_seq(),
                    text: task_line(t, ts, TaskAction::UpdateRunning, Some(run.machine), r),
                });
            }
            let live_end = match run.end {
                Some((ts, action)) => {
                    terminal_idx.push(task_lines.len());
                    task_lines.push(Line {
                        ts,
                        seq: next_seq(),
                        text: task_line(t, ts, action, Some(run.machine), t.requested),
                    });
                    ts
                }
                None => dur,
            };
            live_intervals.push((run.submit, live_end, t));
            let (a, b) = usage_windows(run, iv, dur);
            usage_rows += b - a;
            let span = job_span.entry(t.id.job_id).or_insert((run.submit, Some(0), t));
            span.0 = span.0.min(run.submit);
            span.1 = match (span.1, run.end) {
                (Some(x), Some((e, _))) => Some(x.max(e)),
                _ => None,
            };
        }
    }
    for (job, (first, last, t)) in &job_span {
        let rec = |ts: u64, action| {
            DecodedRecord::JobEvent(JobEventRecord {
                timestamp: SimTime(ts),
                missing_info: None,
                job_id: *job,
                action,
                user: Some(t.user.clone()),
                scheduling_class: Some(t.class),
                job_name: Some(format!("j{job:x}")),
                logical_job_name: Some(format!("l{:x}", job % 977)),
            })
            .encode()
        };
        job_lines.push(Line { ts: *first, seq: next_seq(), text: rec(*first, TaskAction::Submit) });
        if let Some(last) = last.filter(|l| *l > *first) {
            job_lines.push(Line { ts: last, seq: next_seq(), text: rec(last, TaskAction::Finish) });
        }
    }

    let mut records = BTreeMap::new();
    records.insert(TraceTable::MachineEvents, machine_lines.len() as u64);
    records.insert(TraceTable::MachineAttributes, attribute_lines.len() as u64);
    records.insert(TraceTable::JobEvents, job_lines.len() as u64);
    records.insert(TraceTable::TaskEvents, task_lines.len() as u64);
    records.insert(TraceTable::TaskConstraints, constraint_lines.len() as u64);
    records.insert(TraceTable::TaskUsage, usage_rows);
    let clean: u64 = records.values().sum();
    let mut injected = injection_counts(spec, clean);

    // injections into the small tables; orphan usage goes into the stream
    let mut orphan_usage: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    let clean_task_lines = task_lines.len();
    let windows = dur.div_ceil(iv).max(1);
    let mut ghost = 0u64;
    for (class, n) in injected.iter_mut() {
        let mut done = 0u64;
        for k in 0..*n {
            match class {
                AnomalyClass::MissingField | AnomalyClass::BadFieldFormat | AnomalyClass::SchemaMismatch => {
                    if clean_task_lines == 0 {
                        break;
                    }
                    let src = &task_lines[rng.gen_range(0..clean_task_lines)];
                    let text = match class {
                        AnomalyClass::MissingField => replace_field(&src.text, 5, ""),
                        AnomalyClass::BadFieldFormat => replace_field(&src.text, 8, "x"),
                        _ => drop_last_field(&src.text),
                    };
                    let (ts, seq) = (src.ts, src.seq + 1);
                    task_lines.push(Line { ts, seq, text });
                }
                AnomalyClass::UnknownTask => {
                    if terminal_idx.is_empty() {
                        break;
                    }
                    let src = &task_lines[terminal_idx[rng.gen_range(0..terminal_idx.len())]];
                    let (ts, seq, text) = (src.ts, src.seq + 1, src.text.clone());
                    task_lines.push(Line { ts, seq, text });
                }
                AnomalyClass::CorruptTaskState => {
                    let candidates: Vec<_> = live_intervals.iter().filter(|(s, e, _)| e - s >= 2).collect();
                    if candidates.is_empty() {
                        break;
                    }
                    let (s, e, t) = candidates[rng.gen_range(0..candidates.len())];
                    let ts = rng.gen_range(s + 1..*e);
                    task_lines.push(Line {
                        ts,
                        seq: next_seq(),
                        text: task_line(t, ts, TaskAction::Submit, None, t.requested),
                    });
                }
                AnomalyClass::UnknownNode => {
                    let ts = rng.gen_range(0..dur);
                    let rec = DecodedRecord::MachineAttribute(MachineAttributeRecord {
                        timestamp: SimTime(ts),
                        machine: MachineId(GHOST_MACHINE_ID + ghost),
                        name: ATTRIBUTE_NAMES[rng.gen_range(0..ATTRIBUTE_NAMES.len())].to_owned(),
                        value: Some("1".into()),
                        deleted: false,
                    });
                    ghost += 1;
                    attribute_lines.push(Line { ts, seq: next_seq(), text: rec.encode() });
                }
                AnomalyClass::UsageForNonexistentTask => {
                    let w = rng.gen_range(0..windows);
                    let start = w * iv;
                    let mut s = UsageSample::empty(
                        SimTime(start),
                        SimTime(start + iv),
                        TaskId::new(ORPHAN_JOB_ID + k, 0),
                        machines[rng.gen_range(0..machines.len())].id,
                    );
                    s.cpu_rate = Some(round6(rng.gen_range(0.0..0.01)));
                    s.canonical_memory = Some(round6(rng.gen_range(0.0..0.01)));
                    let rec = DecodedRecord::TaskUsage(UsageRecord {
                        sample: s,
                        sample_portion: Some(1.0),
                        aggregation_type: Some(0),
                        sampled_cpu_usage: None,
                    });
                    orphan_usage.entry(w).or_default().push(rec.encode());
                }
                _ => unreachable!("not an injected class"),
            }
            done += 1;
        }
        *n = done;
    }

    let per_part = spec.records_per_part;
    let mut files = Vec::new();
    files.extend(write_lines(out_dir, TraceTable::MachineEvents, per_part, machine_lines)?);
    files.extend(write_lines(out_dir, TraceTable::MachineAttributes, per_part, attribute_lines)?);
    files.extend(write_lines(out_dir, TraceTable::JobEvents, per_part, job_lines)?);
    files.extend(write_lines(out_dir, TraceTable::TaskEvents, per_part, task_lines)?);
    files.extend(write_lines(out_dir, TraceTable::TaskConstraints, per_part, constraint_lines)?);
    files.extend(write_usage(out_dir, spec, &tasks, &mut rng, orphan_usage)?);

    let manifest = TraceManifest {
        spec: spec.clone(),
        files,
        records,
        injected,
        task_runs: tasks.iter().map(|t| t.runs.len() as u64).sum(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(out_dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

fn usage_row(
    t: &TaskPlan,
    run: &Run,
    start: u64,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> String {
    let end_cap = run.end.map_or(spec.duration_micros, |(e, _)| e);
    let end = (start + spec.usage_interval_micros).min(end_cap).max(start + 1);
    let req = t.requested.as_vector();
    let jitter = rng.gen_range(0.8..1.2);
    let cpu = round6(req.cpu * t.cpu_use * jitter);
    let mem = round6(req.memory * t.mem_use * jitter);
    let io = start < DISK_IO_CUTOFF;
    let mut s = UsageSample::empty(SimTime(start), SimTime(end), t.id, run.machine);
    s.cpu_rate = Some(cpu);
    s.canonical_memory = Some(mem);
    s.assigned_memory = Some(round6(mem * 1.2));
    s.unmapped_page_cache = Some(round6(mem * 0.05));
    s.total_page_cache = Some(round6(mem * 0.1));
    s.max_memory = Some(round6(mem * 1.1));
    s.disk_io_time = io.then(|| round6(rng.gen_range(0.0..0.002)));
    s.local_disk_space = Some(round6(req.disk_space * rng.gen_range(0.1..0.5)));
    s.max_cpu_rate = Some(round6(cpu * 1.5));
    s.max_disk_io_time = io.then(|| round6(rng.gen_range(0.0..0.01)));
    s.cycles_per_instruction = Some(if rng.gen_bool(0.001) {
        45.7
    } else {
        round6(rng.gen_range(0.5..3.0))
    });
    s.memory_accesses_per_instruction = Some(round6(rng.gen_range(0.001..0.05)));
    DecodedRecord::TaskUsage(UsageRecord {
        sample: s,
        sample_portion: Some(1.0),
        aggregation_type: Some(0),
        sampled_cpu_usage: Some(cpu),
    })
    .encode()
}

fn write_usage(
    root: &Path,
    spec: &SyntheticSpec,
    tasks: &[TaskPlan],
    rng: &mut ChaCha8Rng,
    mut orphans: BTreeMap<u64, Vec<String>>,
) -> io::Result<Vec<ManifestFile>> {
    let iv = spec.usage_interval_micros;
    let dur = spec.duration_micros;
    // runs keyed by their first usage window
    let mut starts: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
    for (ti, t) in tasks.iter().enumerate() {
        for (ri, run) in t.runs.iter().enumerate() {
            let (a, b) = usage_windows(run, iv, dur);
            if b > a {
                starts.entry(a).or_default().push((ti, ri));
            }
        }
    }
    let mut w = PartWriter::new(root, TraceTable::TaskUsage, spec.records_per_part)?;
    let mut active: BTreeMap<(TaskId, usize), (usize, u64)> = BTreeMap::new();
    let windows = dur.div_ceil(iv);
    for k in 0..windows {
        if let Some(list) = starts.remove(&k) {
            for (ti, ri) in list {
                let (_, b) = usage_windows(&tasks[ti].runs[ri], iv, dur);
                active.insert((tasks[ti].id, ri), (ti, b));
            }
        }
        active.retain(|_, (_, b)| k < *b);
        for ((_, ri), (ti, _)) in &active {
            let t = &tasks[*ti];
            let line = usage_row(t, &t.runs[*ri], k * iv, spec, rng);
            w.write_line(&line)?;
        }
        if let Some(lines) = orphans.remove(&k) {
            for l in lines {
                w.write_line(&l)?;
            }
        }
    }
    w.finish(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, rate: f64) -> SyntheticSpec {
        SyntheticSpec {
            nodes: 10,
            tasks: 60,
            duration_micros: 2 * 3600 * SECOND,
            seed,
            anomaly_rate: rate,
            records_per_part: 500,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_trace(&small(3, 0.05), a.path()).unwrap();
        let mb = generate_trace(&small(3, 0.05), b.path()).unwrap();
        assert_eq!(ma.files, mb.files);
        let mc = generate_trace(&small(4, 0.05), b.path()).unwrap();
        assert_ne!(ma.files, mc.files);
    }

    #[test]
    fn injection_split_is_exact() {
        let spec = SyntheticSpec { anomaly_rate: 0.1, ..small(1, 0.1) };
        let counts = injection_counts(&spec, 1003);
        assert_eq!(counts.values().sum::<u64>(), 100);
        assert!(counts.values().all(|&c| c == 14 || c == 15));
    }

    #[test]
    fn usage_windows_are_aligned() {
        let run = Run {
            submit: 0,
            update_pending: None,
            schedule: 301 * SECOND,
            update_running: None,
            end: Some((1200 * SECOND, TaskAction::Finish)),
            machine: MachineId(1),
        };
        // windows starting at 600 and 900 s
        assert_eq!(usage_windows(&run, 300 * SECOND, 3600 * SECOND), (2, 4));
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSpec::default();
        assert!(s.validate().is_ok());
        s.anomaly_rate = 1.0;
        assert!(s.validate().is_err());
    }
}
