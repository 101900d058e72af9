use crate::model::{EventPayload, WorkloadEvent};
use crate::state::ContextData;

use super::AnomalyClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(AnomalyClass),
}

/// Decides whether an event is consistent with the current state.
///
/// Rejections are values: the caller counts and drops the event, nothing is
/// repaired.
pub fn anomaly_filter(event: &WorkloadEvent, state: &ContextData) -> Verdict {
    use EventPayload::*;
    let verdict = match &event.payload {
        AddTask { task, .. } => {
            if state.task(task).is_some() {
                // a live task submitted again: the trace contradicts itself
                Err(AnomalyClass::CorruptTaskState)
            } else {
                Ok(())
            }
        }
        UpdateTaskRequiredResources { task, .. }
        | UpdateTaskConstraints { task, .. }
        | RemoveTask { task, .. } => {
            if state.task(task).is_some() {
                Ok(())
            } else {
                Err(AnomalyClass::UnknownTask)
            }
        }
        UpdateTaskUsedResources { sample } => {
            if state.task(&sample.task).is_some() {
                Ok(())
            } else {
                Err(AnomalyClass::UsageForNonexistentTask)
            }
        }
        AddNode { .. } => Ok(()),
        UpdateNodeTotalResources { machine, .. }
        | AddNodeAttributes { machine, .. }
        | RemoveNodeAttributes { machine, .. } => {
            if state.node(machine).is_some() {
                Ok(())
            } else {
                Err(AnomalyClass::UnknownNode)
            }
        }
        RemoveNode { machine } => match state.node(machine) {
            Some(n) if n.online => Ok(()),
            _ => Err(AnomalyClass::UnknownNode),
        },
    };
    match verdict {
        Ok(()) => Verdict::Accept,
        Err(c) => Verdict::Reject(c),
    }
}
