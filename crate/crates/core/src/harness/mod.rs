//! Scheduler fan-out.
//!
//! Every tick the harness hands the same batch to every registered
//! scheduler, collects their placement decisions and routes them through
//! [`ContextData::place_task`]. One scheduler is authoritative and places on
//! the real state; the others run in shadow mode on forked copies that see
//! the same events but only their own placements.
//!
//! Schedulers are either in-process ([`Scheduler`] implementations, run on
//! the rayon pool) or remote processes speaking the [`protocol`] over TCP.

mod client;
mod greedy;
pub mod protocol;
mod server;

use std::collections::HashMap;
use std::io::Write;
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::SimTime;
use crate::pipeline::EventBatch;
use crate::state::{ContextData, PlacementOutcome};

pub use client::{ControlClient, SchedulerClient, SessionSummary};
pub use greedy::{greedy_schedule, placement_neutral, GreedyScheduler};
pub use protocol::{
    ClientRole, ControlCommand, DecisionResult, ProtocolError, ProtocolMessage, SchedulerDecision,
    PROTOCOL_VERSION,
};
pub use server::{ControlTarget, Inbound, RemoteRegistration, Server};

/// What a scheduler sees on each tick. `view` already includes the batch.
pub struct TickInput<'a> {
    pub epoch: u64,
    pub sim_time: SimTime,
    pub batch: &'a EventBatch,
    pub view: &'a ContextData,
}

/// An in-process scheduler plug-in. Must not keep references into the view
/// past the call.
pub trait Scheduler: Send {
    fn id(&self) -> &str;
    fn decide(&mut self, input: &TickInput<'_>) -> Vec<SchedulerDecision>;
    fn observe_results(&mut self, _epoch: u64, _results: &[DecisionResult]) {}
}

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    /// Scheduler whose decisions mutate the real state. Defaults to the
    /// first registered one.
    pub authoritative: Option<String>,
    /// How long to wait for a remote scheduler's decisions each tick.
    pub decision_timeout: Duration,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            authoritative: None,
            decision_timeout: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotStats {
    pub scheduler_id: String,
    pub remote: bool,
    pub authoritative: bool,
    pub ticks: u64,
    pub decisions: u64,
    pub placed: u64,
    pub refused: u64,
    /// Ticks that ended without a decision from this scheduler.
    pub missed: u64,
    /// Decisions that arrived for an earlier epoch.
    pub late: u64,
    pub malformed: u64,
    pub disconnected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessStats {
    pub schedulers: Vec<SlotStats>,
}

impl HarnessStats {
    pub fn malformed_total(&self) -> u64 {
        self.schedulers.iter().map(|s| s.malformed).sum()
    }

    pub fn disconnects(&self) -> u64 {
        self.schedulers.iter().filter(|s| s.disconnected).count() as u64
    }
}

struct RemoteConn {
    writer: TcpStream,
    inbox: Receiver<Inbound>,
}

enum Driver {
    Local(Box<dyn Scheduler>),
    Remote(RemoteConn),
}

struct Slot {
    driver: Driver,
    /// Forked state for shadow schedulers.
    fork: Option<ContextData>,
    stats: SlotStats,
}

impl Slot {
    fn active(&self) -> bool {
        !self.stats.disconnected
    }
}

pub struct Harness {
    config: HarnessConfig,
    slots: Vec<Slot>,
    authoritative: Option<usize>,
    registrations: Option<Receiver<RemoteRegistration>>,
}

impl Harness {
    pub fn new(config: HarnessConfig) -> Self {
        Harness {
            config,
            slots: Vec::new(),
            authoritative: None,
            registrations: None,
        }
    }

    pub fn config(&self) -> &HarnessConfig {
        &self.config
    }

    pub fn set_decision_timeout(&mut self, timeout: Duration) {
        self.config.decision_timeout = timeout;
    }

    pub fn add_scheduler(&mut self, scheduler: Box<dyn Scheduler>) {
        let id = scheduler.id().to_owned();
        self.push_slot(id, false, Driver::Local(scheduler));
    }

    /// Accepts remote schedulers registered by a [`Server`].
    pub fn attach(&mut self, registrations: Receiver<RemoteRegistration>) {
        self.registrations = Some(registrations);
    }

    pub fn scheduler_count(&self) -> usize {
        self.slots.iter().filter(|s| s.active()).count()
    }

    fn remote_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.active() && matches!(s.driver, Driver::Remote(_)))
            .count()
    }

    fn push_slot(&mut self, id: String, remote: bool, driver: Driver) {
        self.slots.push(Slot {
            driver,
            fork: None,
            stats: SlotStats {
                scheduler_id: id,
                remote,
                ..Default::default()
            },
        });
    }

    fn register(&mut self, r: RemoteRegistration) {
        info!("registered remote scheduler {}", r.scheduler_id);
        self.push_slot(
            r.scheduler_id,
            true,
            Driver::Remote(RemoteConn {
                writer: r.writer,
                inbox: r.inbox,
            }),
        );
    }

    fn poll_registrations(&mut self) {
        let Some(rx) = &self.registrations else { return };
        let incoming: Vec<_> = rx.try_iter().collect();
        for r in incoming {
            self.register(r);
        }
    }

    /// Blocks until `n` remote schedulers are connected or `timeout` passes.
    /// Returns the number connected.
    pub fn wait_for_remotes(&mut self, n: usize, timeout: Duration) -> usize {
        let deadline = Instant::now() + timeout;
        self.poll_registrations();
        while self.remote_count() < n {
            let Some(rx) = &self.registrations else { break };
            let left = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok(r) => self.register(r),
                Err(_) => break,
            }
        }
        self.remote_count()
    }

    fn resolve_authoritative(&mut self) {
        if self.authoritative.is_some() {
            return;
        }
        let found = match &self.config.authoritative {
            Some(id) => self.slots.iter().position(|s| &s.stats.scheduler_id == id),
            None => (!self.slots.is_empty()).then_some(0),
        };
        if let Some(i) = found {
            self.slots[i].stats.authoritative = true;
            // a slot promoted after running as a shadow drops its fork
            self.slots[i].fork = None;
            self.authoritative = Some(i);
        }
    }

    /// Runs the decision phase for one tick. `ctx` must already contain the
    /// batch. Returns the authoritative scheduler's placement results.
    pub fn tick(&mut self, epoch: u64, batch: &EventBatch, ctx: &mut ContextData) -> Vec<DecisionResult> {
        self.poll_registrations();
        if self.slots.is_empty() {
            return Vec::new();
        }
        self.resolve_authoritative();
        let auth = self.authoritative;
        let sim_time = batch.upto;

        for (i, slot) in self.slots.iter_mut().enumerate() {
            if Some(i) == auth || !slot.active() {
                continue;
            }
            match &mut slot.fork {
                Some(f) => f.apply_batch(batch),
                None => slot.fork = Some(ctx.clone()),
            }
        }

        if self.remote_count() > 0 {
            let line = ProtocolMessage::EventBatch {
                epoch,
                sim_time,
                events: batch.workload_events().cloned().collect(),
            }
            .encode();
            for slot in self.slots.iter_mut().filter(|s| s.active()) {
                if let Driver::Remote(conn) = &mut slot.driver {
                    if let Err(e) = conn.writer.write_all(&line) {
                        warn!("scheduler {} unreachable: {e}", slot.stats.scheduler_id);
                        slot.stats.disconnected = true;
                    }
                }
            }
        }

        let view: &ContextData = ctx;
        let mut decisions: Vec<Option<Vec<SchedulerDecision>>> = self
            .slots
            .par_iter_mut()
            .enumerate()
            .map(|(i, slot)| {
                let Slot { driver, fork, stats } = slot;
                match driver {
                    Driver::Local(s) if !stats.disconnected => {
                        let v = if Some(i) == auth { view } else { fork.as_ref().expect("shadow fork") };
                        Some(s.decide(&TickInput {
                            epoch,
                            sim_time,
                            batch,
                            view: v,
                        }))
                    }
                    _ => None,
                }
            })
            .collect();

        let deadline = Instant::now() + self.config.decision_timeout;
        for (slot, out) in self.slots.iter_mut().zip(decisions.iter_mut()) {
            if let (Driver::Remote(conn), true) = (&slot.driver, slot.active()) {
                *out = collect_remote(conn, epoch, deadline, &mut slot.stats);
            }
        }

        let mut authoritative_results = Vec::new();
        for (i, (slot, out)) in self.slots.iter_mut().zip(decisions).enumerate() {
            if !slot.active() {
                continue;
            }
            slot.stats.ticks += 1;
            let Some(list) = out else {
                slot.stats.missed += 1;
                continue;
            };
            let target: &mut ContextData = if Some(i) == auth {
                ctx
            } else {
                slot.fork.as_mut().expect("shadow fork")
            };
            let results: Vec<DecisionResult> = list
                .iter()
                .map(|d| DecisionResult {
                    task: d.task,
                    node: d.node,
                    outcome: target.place_task(d.task, d.node),
                })
                .collect();
            slot.stats.decisions += list.len() as u64;
            for r in &results {
                match r.outcome {
                    PlacementOutcome::Placed => slot.stats.placed += 1,
                    PlacementOutcome::Refused(_) => slot.stats.refused += 1,
                }
            }
            match &mut slot.driver {
                Driver::Local(s) => s.observe_results(epoch, &results),
                Driver::Remote(conn) => {
                    let msg = ProtocolMessage::DecisionResults {
                        epoch,
                        results: results.clone(),
                    };
                    if conn.writer.write_all(&msg.encode()).is_err() {
                        slot.stats.disconnected = true;
                    }
                }
            }
            if Some(i) == auth {
                authoritative_results = results;
            }
        }
        authoritative_results
    }

    /// Final state of every shadow fork, keyed by scheduler id.
    pub fn shadow_states(&self) -> HashMap<String, &ContextData> {
        self.slots
            .iter()
            .filter_map(|s| s.fork.as_ref().map(|f| (s.stats.scheduler_id.clone(), f)))
            .collect()
    }

    pub fn stats(&self) -> HarnessStats {
        HarnessStats {
            schedulers: self.slots.iter().map(|s| s.stats.clone()).collect(),
        }
    }

    /// Says goodbye to remote schedulers.
    pub fn shutdown(&mut self, reason: &str) {
        let bye = ProtocolMessage::Bye {
            reason: Some(reason.to_owned()),
        }
        .encode();
        for slot in &mut self.slots {
            let active = slot.active();
            if let Driver::Remote(conn) = &mut slot.driver {
                if active {
                    let _ = conn.writer.write_all(&bye);
                }
                let _ = conn.writer.shutdown(Shutdown::Write);
            }
        }
    }
}

impl Drop for Harness {
    fn drop(&mut self) {
        for slot in &mut self.slots {
            if let Driver::Remote(conn) = &mut slot.driver {
                let _ = conn.writer.shutdown(Shutdown::Both);
            }
        }
    }
}

fn collect_remote(
    conn: &RemoteConn,
    epoch: u64,
    deadline: Instant,
    stats: &mut SlotStats,
) -> Option<Vec<SchedulerDecision>> {
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match conn.inbox.recv_timeout(left) {
            Ok(Inbound::Message(ProtocolMessage::Decisions { epoch: e, decisions })) => {
                if e == epoch {
                    return Some(decisions);
                }
                if e < epoch {
                    stats.late += 1;
                } else {
                    stats.malformed += 1;
                }
            }
            Ok(Inbound::Message(ProtocolMessage::Bye { .. })) | Ok(Inbound::Closed) => {
                info!("scheduler {} disconnected", stats.scheduler_id);
                stats.disconnected = true;
                return None;
            }
            Ok(Inbound::Message(other)) => {
                warn!(
                    "scheduler {} sent unexpected {}",
                    stats.scheduler_id,
                    other.type_name()
                );
                stats.malformed += 1;
            }
            Ok(Inbound::Malformed(e)) => {
                warn!("scheduler {} sent a malformed line: {e}", stats.scheduler_id);
                stats.malformed += 1;
            }
            Err(RecvTimeoutError::Timeout) => return None,
            Err(RecvTimeoutError::Disconnected) => {
                stats.disconnected = true;
                return None;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        EventPayload, MachineId, NodeCapacity, NodeRecord, RequestedResources, TaskId, WorkloadEvent,
    };
    use crate::parser::TraceTable;
    use crate::pipeline::{OrderKey, SequencedEvent};

    fn batch(upto: u64, payloads: Vec<EventPayload>) -> EventBatch {
        let events = payloads
            .into_iter()
            .enumerate()
            .map(|(i, p)| SequencedEvent {
                key: OrderKey {
                    time: SimTime(upto),
                    table: TraceTable::TaskEvents,
                    entity: (0, 0),
                    file: 0,
                    line: i as u64,
                    sub: 0,
                },
                event: WorkloadEvent::new(SimTime(upto), p),
            })
            .collect();
        EventBatch {
            upto: SimTime(upto),
            events,
            exhausted: false,
        }
    }

    fn setup() -> EventBatch {
        batch(
            5,
            vec![
                EventPayload::AddNode {
                    node: NodeRecord::new(MachineId(1), "p", NodeCapacity::new(1.0, 1.0)),
                },
                EventPayload::AddTask {
                    task: TaskId::new(1, 0),
                    priority: 0,
                    scheduling_class: 0,
                    requested: RequestedResources::new(0.1, 0.1, 0.0),
                    constraints: vec![],
                },
            ],
        )
    }

    #[test]
    fn no_schedulers_leaves_tasks_pending() {
        let mut h = Harness::new(HarnessConfig::default());
        let b = setup();
        let mut ctx = ContextData::new();
        ctx.apply_batch(&b);
        assert!(h.tick(1, &b, &mut ctx).is_empty());
        assert_eq!(ctx.pending_len(), 1);
    }

    #[test]
    fn shadows_do_not_touch_authoritative_state() {
        let b = setup();
        let mut alone = ContextData::new();
        alone.apply_batch(&b);
        let mut h = Harness::new(HarnessConfig::default());
        h.add_scheduler(Box::new(GreedyScheduler::new("a")));
        h.tick(1, &b, &mut alone);

        let mut with_shadows = ContextData::new();
        with_shadows.apply_batch(&b);
        let mut h = Harness::new(HarnessConfig::default());
        h.add_scheduler(Box::new(GreedyScheduler::new("a")));
        for i in 0..4 {
            h.add_scheduler(Box::new(GreedyScheduler::new(format!("s{i}"))));
        }
        let results = h.tick(1, &b, &mut with_shadows);
        assert_eq!(results.len(), 1);
        assert_eq!(alone, with_shadows);
        assert_eq!(h.shadow_states().len(), 4);
        for s in h.stats().schedulers {
            assert_eq!(s.placed, 1, "{}", s.scheduler_id);
        }
    }

    #[test]
    fn configured_authoritative_scheduler() {
        let b = setup();
        let mut ctx = ContextData::new();
        ctx.apply_batch(&b);
        let mut h = Harness::new(HarnessConfig {
            authoritative: Some("b".into()),
            ..Default::default()
        });
        h.add_scheduler(Box::new(GreedyScheduler::new("a")));
        h.add_scheduler(Box::new(GreedyScheduler::new("b")));
        h.tick(1, &b, &mut ctx);
        let stats = h.stats();
        assert!(!stats.schedulers[0].authoritative);
        assert!(stats.schedulers[1].authoritative);
    }
}
