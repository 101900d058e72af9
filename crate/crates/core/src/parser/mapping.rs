use crate::model::{
    ConstraintDelta, EventPayload, NodeAttributes, NodeRecord, RemovalCause, WorkloadEvent,
};

use super::records::{DecodedRecord, MachineEventKind};
use super::TaskAction;

/// Maps a decoded record to the workload events it produces.
///
/// SUBMIT expands to `AddTask` followed by `UpdateTaskRequiredResources` at
/// the same timestamp; SCHEDULE is dropped because placement belongs to the
/// scheduler under test. Job events carry no state change for the simulator.
pub fn map_to_events(record: &DecodedRecord) -> Vec<WorkloadEvent> {
    let ev = |payload| WorkloadEvent::new(record.timestamp(), payload);
    match record {
        DecodedRecord::TaskEvent(r) => match r.action {
            TaskAction::Submit => vec![
                ev(EventPayload::AddTask {
                    task: r.task,
                    priority: r.priority,
                    scheduling_class: r.scheduling_class,
                    requested: r.requested,
                    constraints: Vec::new(),
                }),
                ev(EventPayload::UpdateTaskRequiredResources {
                    task: r.task,
                    requested: r.requested,
                    priority: r.priority,
                }),
            ],
            TaskAction::Schedule => Vec::new(),
            TaskAction::Evict
            | TaskAction::Fail
            | TaskAction::Finish
            | TaskAction::Kill
            | TaskAction::Lost => {
                let cause = match r.action {
                    TaskAction::Evict => RemovalCause::Evict,
                    TaskAction::Fail => RemovalCause::Fail,
                    TaskAction::Finish => RemovalCause::Finish,
                    TaskAction::Kill => RemovalCause::Kill,
                    _ => RemovalCause::Lost,
                };
                vec![ev(EventPayload::RemoveTask { task: r.task, cause })]
            }
            TaskAction::UpdatePending | TaskAction::UpdateRunning => {
                vec![ev(EventPayload::UpdateTaskRequiredResources {
                    task: r.task,
                    requested: r.requested,
                    priority: r.priority,
                })]
            }
        },
        DecodedRecord::TaskConstraint(r) => vec![ev(EventPayload::UpdateTaskConstraints {
            task: r.task,
            delta: ConstraintDelta::Add(r.constraint.clone()),
        })],
        DecodedRecord::TaskUsage(r) => vec![ev(EventPayload::UpdateTaskUsedResources {
            sample: r.sample.clone(),
        })],
        DecodedRecord::MachineEvent(r) => match r.kind {
            MachineEventKind::Add => vec![ev(EventPayload::AddNode {
                node: NodeRecord {
                    id: r.machine,
                    platform_id: r.platform_id.clone().unwrap_or_default(),
                    capacity: r.capacity,
                    attributes: NodeAttributes::new(),
                    online: true,
                },
            })],
            MachineEventKind::Update => vec![ev(EventPayload::UpdateNodeTotalResources {
                machine: r.machine,
                capacity: r.capacity,
            })],
            MachineEventKind::Remove => vec![ev(EventPayload::RemoveNode { machine: r.machine })],
        },
        DecodedRecord::MachineAttribute(r) => {
            if r.deleted {
                vec![ev(EventPayload::RemoveNodeAttributes {
                    machine: r.machine,
                    names: vec![r.name.clone()],
                })]
            } else {
                vec![ev(EventPayload::AddNodeAttributes {
                    machine: r.machine,
                    attributes: vec![(r.name.clone(), r.value.clone().unwrap_or_default())],
                })]
            }
        }
        DecodedRecord::JobEvent(_) => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MachineId, NodeCapacity, RequestedResources, SimTime, TaskId};
    use crate::parser::records::{MachineEventRecord, TaskEventRecord};

    fn task_record(action: TaskAction) -> DecodedRecord {
        DecodedRecord::TaskEvent(TaskEventRecord {
            timestamp: SimTime(700_000_000),
            missing_info: None,
            task: TaskId::new(1, 2),
            machine: None,
            action,
            user: None,
            scheduling_class: 1,
            priority: 4,
            requested: RequestedResources::new(0.1, 0.2, 0.0),
            different_machines: None,
        })
    }

    #[test]
    fn submit_expands_to_add_then_update() {
        let evs = map_to_events(&task_record(TaskAction::Submit));
        assert_eq!(evs.len(), 2);
        assert_eq!(evs[0].kind_name(), "AddTask");
        assert_eq!(evs[1].kind_name(), "UpdateTaskRequiredResources");
        assert_eq!(evs[0].timestamp, evs[1].timestamp);
    }

    #[test]
    fn schedule_is_ignored() {
        assert!(map_to_events(&task_record(TaskAction::Schedule)).is_empty());
    }

    #[test]
    fn machine_remove_maps_to_remove_node() {
        let rec = DecodedRecord::MachineEvent(MachineEventRecord {
            timestamp: SimTime(5),
            machine: MachineId(3),
            kind: MachineEventKind::Remove,
            platform_id: None,
            capacity: NodeCapacity::default(),
        });
        let evs = map_to_events(&rec);
        assert_eq!(evs.len(), 1);
        assert!(matches!(evs[0].payload, EventPayload::RemoveNode { machine: MachineId(3) }));
    }
}
