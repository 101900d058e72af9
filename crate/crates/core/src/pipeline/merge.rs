use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{OrderKey, SequencedEvent};

/// K-way merge of individually sorted lists.
pub fn kmerge(lists: Vec<Vec<SequencedEvent>>) -> Vec<SequencedEvent> {
    let total = lists.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total);
    let mut iters: Vec<_> = lists.into_iter().map(Vec::into_iter).collect();
    let mut heads: Vec<Option<SequencedEvent>> = iters.iter_mut().map(Iterator::next).collect();
    let mut heap: BinaryHeap<Reverse<(OrderKey, usize)>> = heads
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.as_ref().map(|e| Reverse((e.key, i))))
        .collect();
    while let Some(Reverse((_, i))) = heap.pop() {
        let e = heads[i].take().expect("head present for queued list");
        out.push(e);
        if let Some(next) = iters[i].next() {
            heap.push(Reverse((next.key, i)));
            heads[i] = Some(next);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EventPayload, MachineId, SimTime, WorkloadEvent};
    use crate::parser::TraceTable;

    fn ev(t: u64, table: TraceTable) -> SequencedEvent {
        SequencedEvent {
            key: OrderKey {
                time: SimTime(t),
                table,
                entity: (0, 0),
                file: 0,
                line: t,
                sub: 0,
            },
            event: WorkloadEvent::new(SimTime(t), EventPayload::RemoveNode { machine: MachineId(0) }),
        }
    }

    #[test]
    fn merge_matches_sort() {
        let a = vec![ev(1, TraceTable::TaskEvents), ev(4, TraceTable::TaskEvents)];
        let b = vec![ev(1, TraceTable::MachineEvents), ev(3, TraceTable::MachineEvents)];
        let c = vec![];
        let mut expected: Vec<_> = a.iter().chain(b.iter()).cloned().collect();
        expected.sort();
        assert_eq!(kmerge(vec![a, b, c]), expected);
    }
}
