//! Buffered table readers and the ordered merge that feeds simulation ticks.
//!
//! Each [`EventSource`] owns an [`EventBuffer`] that a worker thread keeps
//! topped up to a lookahead window past the latest requested time, and never
//! past a hard event cap. [`Pipeline::drain_until`] announces the next tick
//! boundary, blocks until every buffer can prove it holds all events up to
//! that time, and merges them in the total order defined by [`OrderKey`].
//!
//! The batch stream depends only on the input files: worker count and thread
//! interleaving never change which events land in a batch or their order.

mod buffer;
mod merge;

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{SimTime, WorkloadEvent};
use crate::parser::{AnomalyReport, SharedReport, TableSource, TraceTable};

pub use buffer::{BufferCaps, BufferStats, EventBuffer, FillStep, Producer};
pub use merge::kmerge;

use buffer::Wakeup;

/// Total order over events: time, table rank, entity, then source position.
/// `sub` separates the events a single line expands into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OrderKey {
    pub time: SimTime,
    pub table: TraceTable,
    pub entity: (u64, u64),
    pub file: u32,
    pub line: u64,
    pub sub: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencedEvent {
    pub key: OrderKey,
    pub event: WorkloadEvent,
}

impl Eq for SequencedEvent {}

impl PartialOrd for SequencedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SequencedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("source {source_name} failed: {message}")]
    Source { source_name: String, message: String },
    #[error("drain request {requested} is earlier than previous request {previous}")]
    NonMonotone { previous: SimTime, requested: SimTime },
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A producer of ordered events, typically one trace table.
///
/// Events should come out in non-decreasing timestamp order; the buffer
/// tolerates disorder up to the configured tolerance and rejects the rest.
pub trait EventSource: Send {
    fn name(&self) -> String;
    fn next_event(&mut self) -> Result<Option<SequencedEvent>, PipelineError>;
    /// Report that collects this source's parse anomalies.
    fn report(&self) -> SharedReport;
}

/// Adapts any iterator of events into a source. Handy for tests and for
/// feeding pre-built event streams.
pub struct IterSource<I> {
    name: String,
    iter: I,
    report: SharedReport,
}

impl<I> IterSource<I> {
    pub fn new(name: impl Into<String>, iter: I) -> Self {
        IterSource {
            name: name.into(),
            iter,
            report: SharedReport::default(),
        }
    }
}

impl<I: Iterator<Item = SequencedEvent> + Send> EventSource for IterSource<I> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn next_event(&mut self) -> Result<Option<SequencedEvent>, PipelineError> {
        Ok(self.iter.next())
    }

    fn report(&self) -> SharedReport {
        self.report.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub caps: BufferCaps,
    /// Worker threads shared by the sources; source `i` runs on worker
    /// `i % workers`.
    pub workers: usize,
    /// How far below the highest timestamp read so far a table may still
    /// deliver an event. Later arrivals are rejected as out of order.
    pub disorder_tolerance_micros: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            caps: BufferCaps::default(),
            workers: TraceTable::ALL.len(),
            disorder_tolerance_micros: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.workers == 0 {
            return Err(PipelineError::InvalidConfig("workers must be at least 1".into()));
        }
        if self.caps.max_events == 0 {
            return Err(PipelineError::InvalidConfig("max_events must be at least 1".into()));
        }
        if self.disorder_tolerance_micros > self.caps.lookahead_micros {
            return Err(PipelineError::InvalidConfig(
                "disorder tolerance cannot exceed the lookahead window".into(),
            ));
        }
        Ok(())
    }
}

/// Events released for one tick, in merge order.
#[derive(Debug, Clone, Default)]
pub struct EventBatch {
    pub upto: SimTime,
    pub events: Vec<SequencedEvent>,
    /// Every source has ended and nothing is left buffered.
    pub exhausted: bool,
}

impl EventBatch {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn workload_events(&self) -> impl Iterator<Item = &WorkloadEvent> {
        self.events.iter().map(|e| &e.event)
    }
}

impl fmt::Display for EventBatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "batch(upto={}, events={})", self.upto, self.events.len())
    }
}

pub struct Pipeline {
    buffers: Vec<Arc<EventBuffer>>,
    reports: Vec<SharedReport>,
    wakeups: Vec<Arc<Wakeup>>,
    workers: Vec<JoinHandle<()>>,
    shutdown: Arc<AtomicBool>,
    last_upto: Option<SimTime>,
}

const FILL_CHUNK: usize = 4096;

impl Pipeline {
    /// Starts worker threads that fill one buffer per source. Lookahead is
    /// measured from `start` until the first drain request arrives.
    pub fn start(
        sources: Vec<Box<dyn EventSource>>,
        config: PipelineConfig,
        start: SimTime,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let n_workers = config.workers.min(sources.len()).max(1);
        let wakeups: Vec<Arc<Wakeup>> = (0..n_workers).map(|_| Arc::new(Wakeup::default())).collect();
        let mut assigned: Vec<Vec<Producer>> = (0..n_workers).map(|_| Vec::new()).collect();
        let mut buffers = Vec::with_capacity(sources.len());
        let mut reports = Vec::with_capacity(sources.len());
        for (i, source) in sources.into_iter().enumerate() {
            let w = i % n_workers;
            let buffer = Arc::new(EventBuffer::new(
                source.name(),
                config.caps,
                config.disorder_tolerance_micros,
                start,
                wakeups[w].clone(),
            ));
            reports.push(source.report());
            buffers.push(buffer.clone());
            assigned[w].push(Producer::new(source, buffer));
        }
        let shutdown = Arc::new(AtomicBool::new(false));
        let mut workers = Vec::new();
        for (w, producers) in assigned.into_iter().enumerate() {
            if producers.is_empty() {
                continue;
            }
            let wake = wakeups[w].clone();
            let stop = shutdown.clone();
            let handle = std::thread::Builder::new()
                .name(format!("trace-worker-{w}"))
                .spawn(move || worker_loop(producers, wake, stop))?;
            workers.push(handle);
        }
        Ok(Pipeline {
            buffers,
            reports,
            wakeups,
            workers,
            shutdown,
            last_upto: None,
        })
    }

    /// One table reader per GCD table under `root`.
    pub fn from_trace_root(root: &Path, config: PipelineConfig, start: SimTime) -> Result<Self, PipelineError> {
        let mut sources: Vec<Box<dyn EventSource>> = Vec::new();
        for table in TraceTable::ALL {
            let report = SharedReport::default();
            sources.push(Box::new(TableSource::open(root, table, report)?));
        }
        Self::start(sources, config, start)
    }

    /// Every event with timestamp `<= upto`, merged across sources. Blocks
    /// until each source has read past `upto` or ended.
    pub fn drain_until(&mut self, upto: SimTime) -> Result<EventBatch, PipelineError> {
        if let Some(previous) = self.last_upto {
            if upto < previous {
                return Err(PipelineError::NonMonotone {
                    previous,
                    requested: upto,
                });
            }
        }
        self.last_upto = Some(upto);
        for b in &self.buffers {
            b.announce(upto);
        }
        let mut staged = Vec::with_capacity(self.buffers.len());
        let mut exhausted = true;
        for b in &self.buffers {
            let taken = b.take_until(upto)?;
            exhausted &= taken.exhausted;
            staged.push(taken.events);
        }
        Ok(EventBatch {
            upto,
            events: kmerge(staged),
            exhausted,
        })
    }

    /// Parse anomalies from all sources, merged in source order.
    pub fn parse_anomalies(&self) -> AnomalyReport {
        let mut total = AnomalyReport::new();
        for r in &self.reports {
            total.merge(&r.lock().expect("anomaly report poisoned"));
        }
        total
    }

    pub fn buffer_stats(&self) -> Vec<(String, BufferStats)> {
        self.buffers.iter().map(|b| (b.name().to_owned(), b.stats())).collect()
    }

    pub fn source_count(&self) -> usize {
        self.buffers.len()
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for w in &self.wakeups {
            w.wake();
        }
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
    }
}

fn worker_loop(mut producers: Vec<Producer>, wake: Arc<Wakeup>, stop: Arc<AtomicBool>) {
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let mut progressed = false;
        let mut all_finished = true;
        for p in producers.iter_mut() {
            match p.fill_step(FILL_CHUNK) {
                FillStep::Progress(_) => {
                    progressed = true;
                    all_finished = false;
                }
                FillStep::Blocked => all_finished = false,
                FillStep::Finished => {}
            }
        }
        if all_finished {
            return;
        }
        if !progressed {
            wake.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EventPayload, MachineId, NodeCapacity, NodeRecord, RequestedResources, TaskId};

    pub(crate) fn key(time: u64, table: TraceTable, entity: u64, line: u64) -> OrderKey {
        OrderKey {
            time: SimTime(time),
            table,
            entity: (entity, 0),
            file: 0,
            line,
            sub: 0,
        }
    }

    fn node_event(time: u64, line: u64) -> SequencedEvent {
        SequencedEvent {
            key: key(time, TraceTable::MachineEvents, 1, line),
            event: WorkloadEvent::new(
                SimTime(time),
                EventPayload::AddNode {
                    node: NodeRecord::new(MachineId(1), "p", NodeCapacity::new(1.0, 1.0)),
                },
            ),
        }
    }

    fn task_event(time: u64, line: u64) -> SequencedEvent {
        SequencedEvent {
            key: key(time, TraceTable::TaskEvents, 1, line),
            event: WorkloadEvent::new(
                SimTime(time),
                EventPayload::AddTask {
                    task: TaskId::new(1, 0),
                    priority: 0,
                    scheduling_class: 0,
                    requested: RequestedResources::default(),
                    constraints: vec![],
                },
            ),
        }
    }

    fn boxed(name: &str, v: Vec<SequencedEvent>) -> Box<dyn EventSource> {
        Box::new(IterSource::new(name, v.into_iter()))
    }

    #[test]
    fn merges_across_buffers() {
        let sources = vec![
            boxed("a", vec![node_event(3, 1)]),
            boxed("b", vec![node_event(1, 1)]),
            boxed("c", vec![node_event(2, 1)]),
        ];
        let mut p = Pipeline::start(sources, PipelineConfig::default(), SimTime(0)).unwrap();
        let b = p.drain_until(SimTime(5)).unwrap();
        let times: Vec<u64> = b.events.iter().map(|e| e.key.time.0).collect();
        assert_eq!(times, [1, 2, 3]);
        assert!(b.exhausted);
    }

    #[test]
    fn machine_event_precedes_task_event_at_same_time() {
        for workers in [1, 2, 6] {
            let sources = vec![boxed("tasks", vec![task_event(7, 1)]), boxed("machines", vec![node_event(7, 1)])];
            let cfg = PipelineConfig { workers, ..Default::default() };
            let mut p = Pipeline::start(sources, cfg, SimTime(0)).unwrap();
            let b = p.drain_until(SimTime(7)).unwrap();
            let kinds: Vec<_> = b.workload_events().map(|e| e.kind_name()).collect();
            assert_eq!(kinds, ["AddNode", "AddTask"]);
        }
    }

    #[test]
    fn early_request_gives_empty_batch() {
        let sources = vec![boxed("a", vec![node_event(100, 1)])];
        let mut p = Pipeline::start(sources, PipelineConfig::default(), SimTime(0)).unwrap();
        let b = p.drain_until(SimTime(50)).unwrap();
        assert!(b.is_empty());
        assert!(!b.exhausted);
        let b = p.drain_until(SimTime(100)).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.exhausted);
    }

    #[test]
    fn non_monotone_request_is_refused() {
        let mut p = Pipeline::start(vec![boxed("a", vec![])], PipelineConfig::default(), SimTime(0)).unwrap();
        p.drain_until(SimTime(10)).unwrap();
        assert!(matches!(
            p.drain_until(SimTime(5)),
            Err(PipelineError::NonMonotone { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = PipelineConfig { workers: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.workers = 1;
        cfg.disorder_tolerance_micros = cfg.caps.lookahead_micros + 1;
        assert!(cfg.validate().is_err());
    }
}
