use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::model::SimTime;
use crate::parser::{AnomalyClass, SharedReport, SourcePos};

use super::{EventSource, PipelineError, SequencedEvent};

/// Bounds on how far ahead a buffer may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferCaps {
    /// Events later than the latest drain request plus this window stay unread.
    pub lookahead_micros: u64,
    /// Hard cap on buffered events.
    pub max_events: usize,
}

impl Default for BufferCaps {
    fn default() -> Self {
        BufferCaps {
            lookahead_micros: 1_800_000_000,
            max_events: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStats {
    pub peak_len: usize,
    /// Largest distance seen between a buffered timestamp and the drain
    /// request in force when it was buffered.
    pub max_lead_micros: u64,
    pub pushed: u64,
    pub drained: u64,
    /// Drains that had to release events because the buffer was full.
    pub forced_releases: u64,
    /// Events dropped for arriving below the watermark.
    pub late: u64,
}

/// Edge-triggered wakeup for a worker thread.
#[derive(Default)]
pub(crate) struct Wakeup {
    flag: Mutex<bool>,
    cv: Condvar,
}

impl Wakeup {
    pub(crate) fn wake(&self) {
        let mut f = self.flag.lock().expect("wakeup poisoned");
        *f = true;
        self.cv.notify_all();
    }

    pub(crate) fn wait(&self) {
        let mut f = self.flag.lock().expect("wakeup poisoned");
        while !*f {
            f = self.cv.wait(f).expect("wakeup poisoned");
        }
        *f = false;
    }
}

/// Why the producer last stopped reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stall {
    None,
    Room,
    /// Holding an event at this time, beyond the read-ahead limit.
    Lookahead(SimTime),
}

struct Inner {
    stall: Stall,
    heap: BinaryHeap<Reverse<SequencedEvent>>,
    /// Every event below this time has been delivered to the buffer.
    watermark: SimTime,
    /// Raised by a forced release; nothing below it may be accepted later.
    floor: SimTime,
    demand: SimTime,
    terminal: bool,
    error: Option<(String, String)>,
    stats: BufferStats,
}

/// Time-ordered buffer for one source, shared between its producer and the
/// draining consumer.
pub struct EventBuffer {
    name: String,
    caps: BufferCaps,
    tolerance: u64,
    inner: Mutex<Inner>,
    consumer: Condvar,
    producer: Arc<Wakeup>,
}

pub(crate) struct Taken {
    pub events: Vec<SequencedEvent>,
    pub exhausted: bool,
}

impl EventBuffer {
    pub(crate) fn new(
        name: String,
        caps: BufferCaps,
        tolerance: u64,
        start: SimTime,
        producer: Arc<Wakeup>,
    ) -> Self {
        EventBuffer {
            name,
            caps,
            tolerance,
            inner: Mutex::new(Inner {
                stall: Stall::None,
                heap: BinaryHeap::new(),
                watermark: SimTime::ZERO,
                floor: SimTime::ZERO,
                demand: start,
                terminal: false,
                error: None,
                stats: BufferStats::default(),
            }),
            consumer: Condvar::new(),
            producer,
        }
    }

    /// Stand-alone buffer with no worker thread, driven through
    /// [`Producer::fill`].
    pub fn standalone(name: impl Into<String>, caps: BufferCaps, start: SimTime) -> Arc<Self> {
        Arc::new(Self::new(name.into(), caps, 0, start, Arc::new(Wakeup::default())))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn caps(&self) -> BufferCaps {
        self.caps
    }

    pub fn len(&self) -> usize {
        self.lock().heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> BufferStats {
        self.lock().stats
    }

    /// Earliest and latest buffered timestamps.
    pub fn span(&self) -> Option<(SimTime, SimTime)> {
        let g = self.lock();
        let first = g.heap.peek()?.0.key.time;
        let last = g.heap.iter().map(|e| e.0.key.time).max()?;
        Some((first, last))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("event buffer poisoned")
    }

    /// Records a new drain request so the producer may read further ahead.
    /// A producer waiting on the lookahead is only woken once the window has
    /// moved by a quarter of its width, so it reads in large steps.
    pub(crate) fn announce(&self, upto: SimTime) {
        let mut g = self.lock();
        if upto > g.demand {
            g.demand = upto;
        }
        let wake = match g.stall {
            Stall::None | Stall::Room => false,
            Stall::Lookahead(t) => {
                let slack = self.caps.lookahead_micros / 4;
                t.0 <= g.demand.0.saturating_add(self.caps.lookahead_micros - slack)
            }
        };
        drop(g);
        if wake {
            self.producer.wake();
        }
    }

    fn set_stall(&self, stall: Stall) {
        self.lock().stall = stall;
    }

    /// Returns free slots, the read-ahead limit and the rejection floor.
    fn limits(&self) -> (usize, SimTime, SimTime) {
        let g = self.lock();
        let room = self.caps.max_events.saturating_sub(g.heap.len());
        (
            room,
            g.demand.saturating_add(self.caps.lookahead_micros),
            g.floor,
        )
    }

    /// Pushes a chunk read by the producer and returns the events rejected
    /// because a forced release raised the floor in the meantime.
    fn push(
        &self,
        events: Vec<SequencedEvent>,
        max_seen: Option<SimTime>,
        eof: bool,
        error: Option<(String, String)>,
        stall: Stall,
    ) -> Vec<SequencedEvent> {
        let mut g = self.lock();
        g.stall = stall;
        let mut rejected = Vec::new();
        let demand = g.demand;
        for e in events {
            if e.key.time < g.floor {
                g.stats.late += 1;
                rejected.push(e);
                continue;
            }
            let lead = e.key.time.0.saturating_sub(demand.0);
            g.stats.max_lead_micros = g.stats.max_lead_micros.max(lead);
            g.stats.pushed += 1;
            g.heap.push(Reverse(e));
        }
        g.stats.peak_len = g.stats.peak_len.max(g.heap.len());
        if let Some(t) = max_seen {
            let wm = t.saturating_sub(self.tolerance);
            if wm > g.watermark {
                g.watermark = wm;
            }
        }
        if eof {
            g.terminal = true;
        }
        if error.is_some() {
            g.error = error;
            g.terminal = true;
        }
        drop(g);
        self.consumer.notify_all();
        rejected
    }

    /// Removes every event with timestamp `<= upto`, waiting until the
    /// producer has shown that no more such events can arrive.
    pub(crate) fn take_until(&self, upto: SimTime) -> Result<Taken, PipelineError> {
        let mut g = self.lock();
        let mut out = Vec::new();
        let mut forced = false;
        loop {
            while let Some(top) = g.heap.peek() {
                let t = top.0.key.time;
                if t > upto || (t >= g.watermark && !g.terminal) {
                    break;
                }
                let Reverse(e) = g.heap.pop().expect("peeked");
                out.push(e);
            }
            if let Some((source_name, message)) = &g.error {
                return Err(PipelineError::Source {
                    source_name: source_name.clone(),
                    message: message.clone(),
                });
            }
            if g.terminal || g.watermark > upto {
                break;
            }
            if g.heap.len() >= self.caps.max_events {
                // The producer is stalled on the cap and cannot advance the
                // watermark. Release everything up to `upto` and refuse any
                // later arrival below it.
                let floor = upto.saturating_add(1);
                if floor > g.floor {
                    g.floor = floor;
                }
                if floor > g.watermark {
                    g.watermark = floor;
                }
                g.stats.forced_releases += 1;
                forced = true;
                continue;
            }
            self.producer.wake();
            g = self.consumer.wait(g).expect("event buffer poisoned");
        }
        let exhausted = g.terminal && g.heap.is_empty();
        g.stats.drained += out.len() as u64;
        let wake = g.stall == Stall::Room && !out.is_empty();
        drop(g);
        if wake {
            self.producer.wake();
        }
        if forced {
            out.sort_unstable();
        }
        Ok(Taken { events: out, exhausted })
    }
}

pub enum FillStep {
    Progress(usize),
    /// Full, or the next event lies beyond the lookahead window.
    Blocked,
    Finished,
}

/// Reads from a source into its buffer.
pub struct Producer {
    source: Box<dyn EventSource>,
    buffer: Arc<EventBuffer>,
    report: SharedReport,
    peeked: Option<SequencedEvent>,
    max_seen: Option<SimTime>,
    done: bool,
}

impl Producer {
    pub fn new(source: Box<dyn EventSource>, buffer: Arc<EventBuffer>) -> Self {
        let report = source.report();
        Producer {
            source,
            buffer,
            report,
            peeked: None,
            max_seen: None,
            done: false,
        }
    }

    pub fn buffer(&self) -> &Arc<EventBuffer> {
        &self.buffer
    }

    fn late(&self, e: &SequencedEvent) {
        let pos = SourcePos::new(e.key.table, e.key.file, e.key.line);
        self.report
            .lock()
            .expect("anomaly report poisoned")
            .record(AnomalyClass::OutOfOrder, Some(pos));
    }

    /// Reads up to `chunk` events that fit the caps into the buffer.
    pub fn fill_step(&mut self, chunk: usize) -> FillStep {
        if self.done {
            return FillStep::Finished;
        }
        let (room, limit, floor) = self.buffer.limits();
        if room == 0 {
            self.buffer.set_stall(Stall::Room);
            return FillStep::Blocked;
        }
        let want = room.min(chunk.max(1));
        let mut local = Vec::with_capacity(want.min(4096));
        let mut eof = false;
        let mut error = None;
        let tolerance = self.buffer.tolerance;
        while local.len() < want {
            let e = match self.peeked.take() {
                Some(e) => e,
                None => match self.source.next_event() {
                    Ok(Some(e)) => e,
                    Ok(None) => {
                        eof = true;
                        break;
                    }
                    Err(err) => {
                        error = Some((self.source.name(), err.to_string()));
                        break;
                    }
                },
            };
            let t = e.key.time;
            let below_watermark = self
                .max_seen
                .is_some_and(|m| t < m.saturating_sub(tolerance));
            if below_watermark || t < floor {
                self.buffer.lock().stats.late += 1;
                self.late(&e);
                continue;
            }
            if self.max_seen.is_none_or(|m| t > m) {
                self.max_seen = Some(t);
            }
            if t > limit {
                self.peeked = Some(e);
                break;
            }
            local.push(e);
        }
        let added = local.len();
        let failed = error.is_some();
        let stall = match &self.peeked {
            Some(e) => Stall::Lookahead(e.key.time),
            None if added == room => Stall::Room,
            None => Stall::None,
        };
        let rejected = self.buffer.push(local, self.max_seen, eof, error, stall);
        for e in &rejected {
            self.late(e);
        }
        if eof || failed {
            self.done = true;
            return FillStep::Finished;
        }
        if added == 0 {
            FillStep::Blocked
        } else {
            FillStep::Progress(added - rejected.len())
        }
    }

    /// Fills until the buffer reaches its event cap, the next event lies past
    /// the lookahead window, or the source ends. Returns the events added.
    pub fn fill(&mut self) -> usize {
        let before = self.buffer.stats().pushed;
        while let FillStep::Progress(_) = self.fill_step(usize::MAX) {}
        (self.buffer.stats().pushed - before) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EventPayload, MachineId, WorkloadEvent};
    use crate::parser::TraceTable;
    use crate::pipeline::{IterSource, OrderKey};

    fn ev(t: u64, line: u64) -> SequencedEvent {
        SequencedEvent {
            key: OrderKey {
                time: SimTime(t),
                table: TraceTable::MachineEvents,
                entity: (1, 0),
                file: 0,
                line,
                sub: 0,
            },
            event: WorkloadEvent::new(SimTime(t), EventPayload::RemoveNode { machine: MachineId(1) }),
        }
    }

    fn producer(times: &[u64], caps: BufferCaps, start: u64) -> Producer {
        let events: Vec<_> = times.iter().enumerate().map(|(i, &t)| ev(t, i as u64)).collect();
        let buf = EventBuffer::standalone("t", caps, SimTime(start));
        Producer::new(Box::new(IterSource::new("t", events.into_iter())), buf)
    }

    #[test]
    fn fill_stops_at_event_cap() {
        let caps = BufferCaps { lookahead_micros: 1000, max_events: 3 };
        let mut p = producer(&[1, 2, 3, 4, 5], caps, 0);
        assert_eq!(p.fill(), 3);
        assert_eq!(p.buffer().len(), 3);
    }

    #[test]
    fn fill_stops_at_lookahead() {
        let caps = BufferCaps { lookahead_micros: 10, max_events: 100 };
        let mut p = producer(&[1, 5, 10, 11, 30], caps, 0);
        assert_eq!(p.fill(), 3);
        assert_eq!(p.buffer().span(), Some((SimTime(1), SimTime(10))));
    }

    #[test]
    fn take_respects_watermark_and_terminal() {
        let caps = BufferCaps { lookahead_micros: 100, max_events: 100 };
        let mut p = producer(&[1, 5, 5, 9], caps, 0);
        p.fill();
        let t = p.buffer().take_until(SimTime(5)).unwrap();
        assert_eq!(t.events.len(), 3);
        assert!(!t.exhausted);
        let t = p.buffer().take_until(SimTime(9)).unwrap();
        assert_eq!(t.events.len(), 1);
        assert!(t.exhausted);
    }

    #[test]
    fn out_of_order_arrival_is_dropped() {
        let caps = BufferCaps { lookahead_micros: 100, max_events: 100 };
        let mut p = producer(&[5, 3, 7], caps, 0);
        assert_eq!(p.fill(), 2);
        assert_eq!(p.buffer().stats().late, 1);
        assert_eq!(p.report.lock().unwrap().count(AnomalyClass::OutOfOrder), 1);
    }

    #[test]
    fn full_buffer_forces_release() {
        let caps = BufferCaps { lookahead_micros: 100, max_events: 2 };
        let mut p = producer(&[1, 1, 1, 2], caps, 0);
        p.fill();
        // the third event at t=1 is still unread, but the cap blocks it
        let t = p.buffer().take_until(SimTime(1)).unwrap();
        assert_eq!(t.events.len(), 2);
        assert_eq!(p.buffer().stats().forced_releases, 1);
        p.fill();
        assert_eq!(p.buffer().stats().late, 1);
    }
}
