use im::{OrdMap, OrdSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    fits, task_eligible, ConstraintDelta, EventPayload, MachineId, NodeRecord, ResourceVector,
    SimTime, TaskId, TaskRecord, TaskState, WorkloadEvent,
};
use crate::parser::{anomaly_filter, AnomalyClass, AnomalyReport, SourcePos, Verdict};
use crate::pipeline::EventBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyResult {
    Applied,
    Rejected(AnomalyClass),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefusalReason {
    UnknownTask,
    UnknownNode,
    NotPending,
    Ineligible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum PlacementOutcome {
    Placed,
    Refused(RefusalReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("unknown node {0}")]
    UnknownNode(MachineId),
}

/// Monotone counters kept alongside the state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub events_applied: u64,
    pub events_rejected: u64,
    /// `AddTask` events seen, accepted or not.
    pub tasks_added: u64,
    pub tasks_rejected: u64,
    /// Tasks that left the state, including those displaced by node removal.
    pub tasks_removed: u64,
    pub displaced: u64,
    pub placements: u64,
}

/// Fractions of a node's capacity. Values above 1.0 mean overcommit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub requested_cpu: f64,
    pub requested_memory: f64,
    pub used_cpu: f64,
    pub used_memory: f64,
}

/// Point-in-time counters and gauges.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSample {
    pub sim_time: SimTime,
    pub epoch: u64,
    pub nodes_online: u64,
    pub tasks_pending: u64,
    pub tasks_running: u64,
    pub events_applied: u64,
    pub events_rejected: u64,
    pub anomalies_total: u64,
    pub displaced_total: u64,
    pub mean_cpu_requested: f64,
    pub mean_cpu_used: f64,
}

/// The cluster state: nodes, tasks, the pending queue and placements.
///
/// Built on persistent maps, so `clone` is O(1) and a published clone is an
/// immutable, fully consistent view that readers can hold while the engine
/// keeps applying events to its own copy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextData {
    pub(super) nodes: OrdMap<MachineId, NodeRecord>,
    pub(super) tasks: OrdMap<TaskId, TaskRecord>,
    /// FIFO arrival sequence number to task.
    pub(super) pending: OrdMap<u64, TaskId>,
    pub(super) pending_seq: OrdMap<TaskId, u64>,
    pub(super) placements: OrdMap<MachineId, OrdSet<TaskId>>,
    pub(super) next_seq: u64,
    pub(super) epoch: u64,
    pub(super) sim_time: SimTime,
    pub(super) counters: Counters,
    pub(super) anomalies: AnomalyReport,
}

impl ContextData {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn sim_time(&self) -> SimTime {
        self.sim_time
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// State-level anomalies: events rejected by the filter plus duplicate
    /// node additions.
    pub fn anomalies(&self) -> &AnomalyReport {
        &self.anomalies
    }

    pub fn task(&self, id: &TaskId) -> Option<&TaskRecord> {
        self.tasks.get(id)
    }

    pub fn node(&self, id: &MachineId) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    /// Pending tasks in arrival order.
    pub fn pending(&self) -> impl Iterator<Item = &TaskRecord> {
        self.pending.values().map(move |id| &self.tasks[id])
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn running_len(&self) -> usize {
        self.tasks.len() - self.pending.len()
    }

    pub fn nodes_online(&self) -> usize {
        self.nodes.values().filter(|n| n.online).count()
    }

    /// Arrival sequence number of a pending task; lower is earlier.
    pub fn pending_order(&self, id: &TaskId) -> Option<u64> {
        self.pending_seq.get(id).copied()
    }

    pub fn tasks_on(&self, m: &MachineId) -> impl Iterator<Item = &TaskRecord> {
        self.placements
            .get(m)
            .into_iter()
            .flat_map(|set| set.iter())
            .map(move |id| &self.tasks[id])
    }

    /// Sum of requested resources of the tasks running on `m`.
    pub fn allocated(&self, m: &MachineId) -> ResourceVector {
        let mut sum = ResourceVector::default();
        for t in self.tasks_on(m) {
            sum += t.requested.as_vector();
        }
        sum
    }

    /// Applies one event without source position information.
    pub fn apply_event(&mut self, event: &WorkloadEvent) -> ApplyResult {
        self.apply_event_at(event, None)
    }

    /// Applies one event; rejections are counted against `pos`.
    pub fn apply_event_at(&mut self, event: &WorkloadEvent, pos: Option<SourcePos>) -> ApplyResult {
        let is_add_task = matches!(event.payload, EventPayload::AddTask { .. });
        if is_add_task {
            self.counters.tasks_added += 1;
        }
        if let Verdict::Reject(class) = anomaly_filter(event, self) {
            self.counters.events_rejected += 1;
            if is_add_task {
                self.counters.tasks_rejected += 1;
            }
            self.anomalies.record(class, pos);
            return ApplyResult::Rejected(class);
        }
        self.counters.events_applied += 1;
        match &event.payload {
            EventPayload::AddTask {
                task,
                priority,
                scheduling_class,
                requested,
                constraints,
            } => {
                let mut rec = TaskRecord::pending(*task, *priority, *scheduling_class, *requested);
                rec.constraints = constraints.iter().cloned().collect();
                self.tasks.insert(*task, rec);
                let seq = self.next_seq;
                self.next_seq += 1;
                self.pending.insert(seq, *task);
                self.pending_seq.insert(*task, seq);
            }
            EventPayload::UpdateTaskRequiredResources {
                task,
                requested,
                priority,
            } => {
                let rec = self.tasks.get_mut(task).expect("filter checked task");
                rec.requested = *requested;
                rec.priority = *priority;
            }
            EventPayload::UpdateTaskUsedResources { sample } => {
                let rec = self.tasks.get_mut(&sample.task).expect("filter checked task");
                rec.last_usage = Some(sample.clone());
            }
            EventPayload::UpdateTaskConstraints { task, delta } => {
                let rec = self.tasks.get_mut(task).expect("filter checked task");
                match delta {
                    ConstraintDelta::Add(c) => {
                        rec.constraints.insert(c.clone());
                    }
                    ConstraintDelta::Remove(c) => {
                        rec.constraints.remove(c);
                    }
                }
            }
            EventPayload::RemoveTask { task, .. } => {
                self.remove_task(task);
            }
            EventPayload::AddNode { node } => match self.nodes.get_mut(&node.id) {
                Some(existing) if existing.online => {
                    existing.capacity = node.capacity;
                    self.anomalies.record(AnomalyClass::DuplicateNode, pos);
                }
                _ => {
                    let mut rec = node.clone();
                    rec.online = true;
                    self.nodes.insert(node.id, rec);
                }
            },
            EventPayload::UpdateNodeTotalResources { machine, capacity } => {
                self.nodes.get_mut(machine).expect("filter checked node").capacity = *capacity;
            }
            EventPayload::AddNodeAttributes { machine, attributes } => {
                let rec = self.nodes.get_mut(machine).expect("filter checked node");
                for (k, v) in attributes {
                    rec.attributes.insert(k.clone(), v.clone());
                }
            }
            EventPayload::RemoveNodeAttributes { machine, names } => {
                let rec = self.nodes.get_mut(machine).expect("filter checked node");
                for k in names {
                    rec.attributes.remove(k);
                }
            }
            EventPayload::RemoveNode { machine } => {
                self.nodes.get_mut(machine).expect("filter checked node").online = false;
                if let Some(tenants) = self.placements.remove(machine) {
                    for t in tenants.iter() {
                        self.tasks.remove(t);
                        self.counters.tasks_removed += 1;
                        self.counters.displaced += 1;
                    }
                }
            }
        }
        ApplyResult::Applied
    }

    fn remove_task(&mut self, id: &TaskId) {
        let Some(rec) = self.tasks.remove(id) else {
            return;
        };
        self.counters.tasks_removed += 1;
        match rec.state {
            TaskState::Pending => {
                if let Some(seq) = self.pending_seq.remove(id) {
                    self.pending.remove(&seq);
                }
            }
            TaskState::Running(m) => {
                if let Some(set) = self.placements.get_mut(&m) {
                    set.remove(id);
                    if set.is_empty() {
                        self.placements.remove(&m);
                    }
                }
            }
        }
    }

    /// Applies a tick batch in order and advances the epoch by one.
    pub fn apply_batch(&mut self, batch: &EventBatch) {
        self.epoch += 1;
        self.sim_time = batch.upto;
        for e in &batch.events {
            let pos = SourcePos::new(e.key.table, e.key.file, e.key.line);
            self.apply_event_at(&e.event, Some(pos));
        }
        // full audits are linear in state size, so large states are sampled
        #[cfg(debug_assertions)]
        if self.epoch % 64 == 0 || self.tasks.len() < 256 {
            if let Err(msg) = self.audit() {
                panic!("state audit failed after epoch {}: {msg}", self.epoch);
            }
        }
    }

    /// Advances the epoch for a tick whose events were applied one by one.
    pub fn finish_epoch(&mut self, sim_time: SimTime) {
        self.epoch += 1;
        self.sim_time = sim_time;
    }

    /// Places a pending task on a node. Never mutates on refusal.
    pub fn place_task(&mut self, task: TaskId, machine: MachineId) -> PlacementOutcome {
        let Some(rec) = self.tasks.get(&task) else {
            return PlacementOutcome::Refused(RefusalReason::UnknownTask);
        };
        let Some(node) = self.nodes.get(&machine) else {
            return PlacementOutcome::Refused(RefusalReason::UnknownNode);
        };
        if !rec.is_pending() {
            return PlacementOutcome::Refused(RefusalReason::NotPending);
        }
        if !task_eligible(rec, node, self.allocated(&machine)) {
            return PlacementOutcome::Refused(RefusalReason::Ineligible);
        }
        self.tasks.get_mut(&task).expect("checked above").state = TaskState::Running(machine);
        if let Some(seq) = self.pending_seq.remove(&task) {
            self.pending.remove(&seq);
        }
        self.placements.entry(machine).or_default().insert(task);
        self.counters.placements += 1;
        PlacementOutcome::Placed
    }

    /// Online nodes where the task is eligible, in ascending id order.
    pub fn eligible_nodes(&self, task: &TaskId) -> Result<Vec<MachineId>, StateError> {
        let rec = self.tasks.get(task).ok_or(StateError::UnknownTask(*task))?;
        Ok(self
            .nodes
            .values()
            .filter(|n| task_eligible(rec, n, self.allocated(&n.id)))
            .map(|n| n.id)
            .collect())
    }

    /// Whether `request` fits on `machine` given an extra tentative
    /// allocation on top of the running tasks.
    pub fn fits_with(&self, task: &TaskRecord, machine: &MachineId, extra: ResourceVector) -> bool {
        let Some(node) = self.nodes.get(machine) else {
            return false;
        };
        let mut alloc = self.allocated(machine);
        alloc += extra;
        node.online
            && task.constraints.iter().all(|c| crate::model::eval_constraint(c, &node.attributes))
            && fits(task.requested.as_vector(), node.capacity, alloc)
    }

    /// Requested and measured load on a node as fractions of its capacity.
    ///
    /// Used resources come from each running task's latest usage sample. A
    /// zero or absent capacity yields 0 for an idle node and infinity
    /// otherwise.
    pub fn utilization(&self, machine: &MachineId) -> Result<Utilization, StateError> {
        let node = self.nodes.get(machine).ok_or(StateError::UnknownNode(*machine))?;
        let mut req = ResourceVector::default();
        let (mut used_cpu, mut used_mem) = (0.0, 0.0);
        for t in self.tasks_on(machine) {
            req += t.requested.as_vector();
            if let Some(u) = &t.last_usage {
                used_cpu += u.cpu_rate.unwrap_or(0.0);
                used_mem += u.canonical_memory.unwrap_or(0.0);
            }
        }
        let frac = |x: f64, cap: Option<f64>| match cap {
            Some(c) if c > 0.0 => x / c,
            _ if x == 0.0 => 0.0,
            _ => f64::INFINITY,
        };
        Ok(Utilization {
            requested_cpu: frac(req.cpu, node.capacity.cpu),
            requested_memory: frac(req.memory, node.capacity.memory),
            used_cpu: frac(used_cpu, node.capacity.cpu),
            used_memory: frac(used_mem, node.capacity.memory),
        })
    }

    /// Counters and gauges for this state. `anomalies_total` covers only
    /// state-level anomalies; the engine adds parse anomalies.
    pub fn counters_sample(&self) -> StatsSample {
        let mut online = 0u64;
        let (mut req_sum, mut used_sum, mut n) = (0.0, 0.0, 0u64);
        for node in self.nodes.values().filter(|n| n.online) {
            online += 1;
            if let Ok(u) = self.utilization(&node.id) {
                if u.requested_cpu.is_finite() && u.used_cpu.is_finite() {
                    req_sum += u.requested_cpu;
                    used_sum += u.used_cpu;
                    n += 1;
                }
            }
        }
        let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
        StatsSample {
            sim_time: self.sim_time,
            epoch: self.epoch,
            nodes_online: online,
            tasks_pending: self.pending.len() as u64,
            tasks_running: self.running_len() as u64,
            events_applied: self.counters.events_applied,
            events_rejected: self.counters.events_rejected,
            anomalies_total: self.anomalies.total(),
            displaced_total: self.counters.displaced,
            mean_cpu_requested: mean(req_sum),
            mean_cpu_used: mean(used_sum),
        }
    }

    /// Walks the whole state and checks the cross-structure invariants.
    pub fn audit(&self) -> Result<(), String> {
        for (m, set) in self.placements.iter() {
            if set.is_empty() {
                return Err(format!("empty placement set for {m}"));
            }
            for t in set.iter() {
                match self.tasks.get(t).map(|r| &r.state) {
                    Some(TaskState::Running(on)) if on == m => {}
                    other => return Err(format!("{t} placed on {m} but state is {other:?}")),
                }
            }
            if !self.nodes.get(m).is_some_and(|n| n.online) {
                return Err(format!("tasks placed on offline or unknown node {m}"));
            }
        }
        let mut running = 0usize;
        for rec in self.tasks.values() {
            match rec.state {
                TaskState::Pending => {
                    let seq = self
                        .pending_seq
                        .get(&rec.id)
                        .ok_or_else(|| format!("pending {} not queued", rec.id))?;
                    if self.pending.get(seq) != Some(&rec.id) {
                        return Err(format!("pending index mismatch for {}", rec.id));
                    }
                }
                TaskState::Running(m) => {
                    running += 1;
                    if self.pending_seq.contains_key(&rec.id) {
                        return Err(format!("running {} still queued", rec.id));
                    }
                    if !self.placements.get(&m).is_some_and(|s| s.contains(&rec.id)) {
                        return Err(format!("running {} missing from placements of {m}", rec.id));
                    }
                }
            }
        }
        if self.pending.len() != self.pending_seq.len() || self.pending.len() + running != self.tasks.len() {
            return Err("pending queue size mismatch".into());
        }
        let c = self.counters;
        if c.tasks_added != self.tasks.len() as u64 + c.tasks_removed + c.tasks_rejected {
            return Err(format!(
                "conservation broken: added {} != live {} + removed {} + rejected {}",
                c.tasks_added,
                self.tasks.len(),
                c.tasks_removed,
                c.tasks_rejected
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        ConstraintOp, NodeCapacity, RemovalCause, RequestedResources, TaskConstraint, UsageSample,
    };

    fn at(payload: EventPayload) -> WorkloadEvent {
        WorkloadEvent::new(SimTime(1), payload)
    }

    fn add_task(j: u64, cpu: f64) -> WorkloadEvent {
        at(EventPayload::AddTask {
            task: TaskId::new(j, 0),
            priority: 0,
            scheduling_class: 0,
            requested: RequestedResources::new(cpu, 0.1, 0.0),
            constraints: vec![],
        })
    }

    fn add_node(m: u64, cpu: f64) -> WorkloadEvent {
        at(EventPayload::AddNode {
            node: NodeRecord::new(MachineId(m), "p", NodeCapacity::new(cpu, 1.0)),
        })
    }

    #[test]
    fn add_then_remove_leaves_nothing() {
        let mut ctx = ContextData::new();
        ctx.apply_event(&add_task(1, 0.1));
        ctx.apply_event(&at(EventPayload::RemoveTask {
            task: TaskId::new(1, 0),
            cause: RemovalCause::Finish,
        }));
        assert_eq!(ctx.tasks().count(), 0);
        assert_eq!(ctx.pending_len(), 0);
        ctx.audit().unwrap();
    }

    #[test]
    fn remove_node_displaces_running_tasks() {
        let mut ctx = ContextData::new();
        ctx.apply_event(&add_node(1, 1.0));
        for j in 0..3 {
            ctx.apply_event(&add_task(j, 0.1));
            assert_eq!(ctx.place_task(TaskId::new(j, 0), MachineId(1)), PlacementOutcome::Placed);
        }
        ctx.apply_event(&at(EventPayload::RemoveNode { machine: MachineId(1) }));
        assert_eq!(ctx.counters().displaced, 3);
        assert_eq!(ctx.tasks().count(), 0);
        assert!(!ctx.node(&MachineId(1)).unwrap().online);
        ctx.audit().unwrap();
    }

    #[test]
    fn constraint_update_keeps_running_task() {
        let mut ctx = ContextData::new();
        ctx.apply_event(&add_node(1, 1.0));
        ctx.apply_event(&add_task(1, 0.1));
        ctx.place_task(TaskId::new(1, 0), MachineId(1));
        ctx.apply_event(&at(EventPayload::UpdateTaskConstraints {
            task: TaskId::new(1, 0),
            delta: ConstraintDelta::Add(TaskConstraint::new("rack", ConstraintOp::Eq, "7")),
        }));
        assert_eq!(ctx.task(&TaskId::new(1, 0)).unwrap().running_on(), Some(MachineId(1)));
        assert_eq!(ctx.eligible_nodes(&TaskId::new(1, 0)).unwrap(), vec![]);
    }

    #[test]
    fn placement_refusals_do_not_mutate() {
        let mut ctx = ContextData::new();
        ctx.apply_event(&add_node(1, 0.5));
        ctx.apply_event(&add_task(1, 0.4));
        ctx.apply_event(&add_task(2, 0.4));
        let before = ctx.clone();
        assert_eq!(
            ctx.place_task(TaskId::new(9, 0), MachineId(1)),
            PlacementOutcome::Refused(RefusalReason::UnknownTask)
        );
        assert_eq!(
            ctx.place_task(TaskId::new(1, 0), MachineId(9)),
            PlacementOutcome::Refused(RefusalReason::UnknownNode)
        );
        assert_eq!(ctx, before);
        assert_eq!(ctx.place_task(TaskId::new(1, 0), MachineId(1)), PlacementOutcome::Placed);
        assert_eq!(
            ctx.place_task(TaskId::new(1, 0), MachineId(1)),
            PlacementOutcome::Refused(RefusalReason::NotPending)
        );
        assert_eq!(
            ctx.place_task(TaskId::new(2, 0), MachineId(1)),
            PlacementOutcome::Refused(RefusalReason::Ineligible)
        );
    }

    #[test]
    fn utilization_fractions() {
        let mut ctx = ContextData::new();
        ctx.apply_event(&add_node(1, 0.5));
        assert_eq!(ctx.utilization(&MachineId(1)).unwrap(), Utilization::default());
        ctx.apply_event(&add_task(1, 0.5));
        ctx.place_task(TaskId::new(1, 0), MachineId(1));
        let mut s = UsageSample::empty(SimTime(0), SimTime(300_000_000), TaskId::new(1, 0), MachineId(77));
        s.cpu_rate = Some(0.01);
        ctx.apply_event(&at(EventPayload::UpdateTaskUsedResources { sample: s }));
        let u = ctx.utilization(&MachineId(1)).unwrap();
        assert_eq!(u.requested_cpu, 1.0);
        assert!((u.used_cpu - 0.02).abs() < 1e-12);
        assert!(matches!(ctx.utilization(&MachineId(2)), Err(StateError::UnknownNode(_))));
    }

    #[test]
    fn duplicate_add_node_updates_capacity_and_counts() {
        let mut ctx = ContextData::new();
        ctx.apply_event(&add_node(1, 0.5));
        assert_eq!(ctx.apply_event(&add_node(1, 0.25)), ApplyResult::Applied);
        assert_eq!(ctx.node(&MachineId(1)).unwrap().capacity.cpu, Some(0.25));
        assert_eq!(ctx.anomalies().count(AnomalyClass::DuplicateNode), 1);
    }

    #[test]
    fn duplicate_submit_is_corrupt_state() {
        let mut ctx = ContextData::new();
        ctx.apply_event(&add_task(1, 0.1));
        assert_eq!(
            ctx.apply_event(&add_task(1, 0.1)),
            ApplyResult::Rejected(AnomalyClass::CorruptTaskState)
        );
        let c = ctx.counters();
        assert_eq!((c.tasks_added, c.tasks_rejected, c.events_applied), (2, 1, 1));
        ctx.audit().unwrap();
    }
}
