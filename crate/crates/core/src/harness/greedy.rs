use crate::model::{task_eligible, EventPayload, NodeRecord, ResourceVector, TaskRecord, WorkloadEvent};
use crate::state::ContextData;

use super::{Scheduler, SchedulerDecision, TickInput};

/// Reference scheduler: highest priority first (FIFO within a priority), each
/// task onto the eligible node with the most free requested CPU.
///
/// Remembers whether its last pass placed nothing. Usage samples do not
/// affect placement, so a tick that brings only usage samples can reuse that
/// empty answer instead of rescanning every node for tasks that cannot fit.
#[derive(Debug, Clone)]
pub struct GreedyScheduler {
    id: String,
    idle: bool,
}

impl GreedyScheduler {
    pub fn new(id: impl Into<String>) -> Self {
        GreedyScheduler { id: id.into(), idle: false }
    }
}

/// True when applying `events` cannot change a greedy decision.
pub fn placement_neutral<'a>(events: impl IntoIterator<Item = &'a WorkloadEvent>) -> bool {
    events
        .into_iter()
        .all(|e| matches!(e.payload, EventPayload::UpdateTaskUsedResources { .. }))
}

impl Default for GreedyScheduler {
    fn default() -> Self {
        Self::new("greedy")
    }
}

impl Scheduler for GreedyScheduler {
    fn id(&self) -> &str {
        &self.id
    }

    fn decide(&mut self, input: &TickInput<'_>) -> Vec<SchedulerDecision> {
        if self.idle && placement_neutral(input.batch.workload_events()) {
            return Vec::new();
        }
        let decisions = greedy_schedule(input.view, &self.id);
        self.idle = decisions.is_empty();
        decisions
    }
}

/// One greedy pass over the pending queue of `view`.
pub fn greedy_schedule(view: &ContextData, scheduler_id: &str) -> Vec<SchedulerDecision> {
    let mut pending: Vec<&TaskRecord> = view.pending().collect();
    if pending.is_empty() {
        return Vec::new();
    }
    // stable sort keeps arrival order within a priority
    pending.sort_by(|a, b| b.priority.cmp(&a.priority));

    // node order follows machine id, so the strict comparison below keeps the lowest id on ties
    let mut nodes: Vec<(&NodeRecord, ResourceVector)> = view
        .nodes()
        .filter(|n| n.online)
        .map(|n| (n, view.allocated(&n.id)))
        .collect();

    let mut decisions = Vec::new();
    for task in pending {
        let mut best: Option<(usize, f64)> = None;
        for (i, (node, used)) in nodes.iter().enumerate() {
            if !task_eligible(task, node, *used) {
                continue;
            }
            let headroom = node.capacity.cpu.unwrap_or(0.0) - used.cpu;
            if best.is_none_or(|(_, h)| headroom > h) {
                best = Some((i, headroom));
            }
        }
        if let Some((i, _)) = best {
            let (node, used) = &mut nodes[i];
            *used += task.requested.as_vector();
            decisions.push(SchedulerDecision {
                task: task.id,
                node: node.id,
                scheduler_id: scheduler_id.to_owned(),
            });
        }
    }
    decisions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        EventPayload, MachineId, NodeCapacity, NodeRecord, RequestedResources, SimTime, TaskId, WorkloadEvent,
    };

    fn ctx(nodes: &[(u64, f64)], tasks: &[(u64, u8, f64)]) -> ContextData {
        let mut c = ContextData::new();
        for &(m, cpu) in nodes {
            c.apply_event(&WorkloadEvent::new(
                SimTime(0),
                EventPayload::AddNode {
                    node: NodeRecord::new(MachineId(m), "p", NodeCapacity::new(cpu, 1.0)),
                },
            ));
        }
        for &(j, prio, cpu) in tasks {
            c.apply_event(&WorkloadEvent::new(
                SimTime(0),
                EventPayload::AddTask {
                    task: TaskId::new(j, 0),
                    priority: prio,
                    scheduling_class: 0,
                    requested: RequestedResources::new(cpu, 0.0, 0.0),
                    constraints: vec![],
                },
            ));
        }
        c
    }

    #[test]
    fn tie_goes_to_lowest_machine_id() {
        let c = ctx(&[(7, 0.5), (3, 0.5)], &[(1, 0, 0.1)]);
        let d = greedy_schedule(&c, "g");
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].node, MachineId(3));
    }

    #[test]
    fn higher_priority_goes_first() {
        let c = ctx(&[(1, 0.5)], &[(1, 0, 0.4), (2, 9, 0.4)]);
        let d = greedy_schedule(&c, "g");
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].task, TaskId::new(2, 0));
    }

    #[test]
    fn spreads_by_headroom() {
        let c = ctx(&[(1, 0.5), (2, 0.5)], &[(1, 0, 0.2), (2, 0, 0.2)]);
        let nodes: Vec<_> = greedy_schedule(&c, "g").iter().map(|d| d.node).collect();
        assert_eq!(nodes, [MachineId(1), MachineId(2)]);
    }

    #[test]
    fn full_cluster_yields_nothing() {
        let c = ctx(&[(1, 0.1)], &[(1, 0, 0.5)]);
        assert!(greedy_schedule(&c, "g").is_empty());
    }
}
