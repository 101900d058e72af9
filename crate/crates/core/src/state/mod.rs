//! Cluster state store.
//!
//! [`ContextData`] is a value: the engine mutates its private copy while
//! applying a batch and then publishes an O(1) clone through a [`StateStore`].
//! Readers (schedulers, stats, control clients) always see a whole epoch,
//! never a half-applied batch.

mod context;
mod snapshot;

use std::sync::{Arc, RwLock};

pub use context::{
    ApplyResult, ContextData, Counters, PlacementOutcome, RefusalReason, StateError, StatsSample,
    Utilization,
};
pub use snapshot::{Snapshot, SnapshotError, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

/// Latest published state view, shared between one writer and many readers.
#[derive(Debug, Default)]
pub struct StateStore {
    current: RwLock<Arc<ContextData>>,
}

impl StateStore {
    pub fn new(ctx: ContextData) -> Self {
        StateStore {
            current: RwLock::new(Arc::new(ctx)),
        }
    }

    /// The most recently published view. Holding it never blocks the writer.
    pub fn load(&self) -> Arc<ContextData> {
        self.current.read().expect("state store poisoned").clone()
    }

    pub fn publish(&self, ctx: ContextData) {
        *self.current.write().expect("state store poisoned") = Arc::new(ctx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EventPayload, MachineId, NodeCapacity, NodeRecord, SimTime, WorkloadEvent};

    #[test]
    fn readers_keep_their_epoch() {
        let store = StateStore::default();
        let mut ctx = ContextData::new();
        ctx.finish_epoch(SimTime(5));
        store.publish(ctx.clone());
        let view = store.load();
        ctx.apply_event(&WorkloadEvent::new(
            SimTime(6),
            EventPayload::AddNode {
                node: NodeRecord::new(MachineId(1), "p", NodeCapacity::new(1.0, 1.0)),
            },
        ));
        ctx.finish_epoch(SimTime(10));
        store.publish(ctx);
        assert_eq!(view.epoch(), 1);
        assert_eq!(view.nodes().count(), 0);
        assert_eq!(store.load().epoch(), 2);
    }
}
