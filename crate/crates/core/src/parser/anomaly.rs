use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::SourcePos;

/// Number of offending positions kept per anomaly class.
pub const SAMPLE_RING: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnomalyClass {
    MissingField,
    UnknownTask,
    UnknownNode,
    CorruptTaskState,
    UsageForNonexistentTask,
    BadFieldFormat,
    SchemaMismatch,
    /// Event timestamp below what the table reader already promised.
    OutOfOrder,
    /// `AddNode` for a machine that is already online.
    DuplicateNode,
}

impl AnomalyClass {
    pub const ALL: [AnomalyClass; 9] = [
        AnomalyClass::MissingField,
        AnomalyClass::UnknownTask,
        AnomalyClass::UnknownNode,
        AnomalyClass::CorruptTaskState,
        AnomalyClass::UsageForNonexistentTask,
        AnomalyClass::BadFieldFormat,
        AnomalyClass::SchemaMismatch,
        AnomalyClass::OutOfOrder,
        AnomalyClass::DuplicateNode,
    ];
}

impl fmt::Display for AnomalyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Monotone per-class counters plus a bounded ring of sample positions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyReport {
    counts: BTreeMap<AnomalyClass, u64>,
    samples: BTreeMap<AnomalyClass, VecDeque<SourcePos>>,
}

pub type SharedReport = Arc<Mutex<AnomalyReport>>;

impl AnomalyReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, class: AnomalyClass, pos: Option<SourcePos>) {
        *self.counts.entry(class).or_insert(0) += 1;
        if let Some(pos) = pos {
            let ring = self.samples.entry(class).or_default();
            if ring.len() == SAMPLE_RING {
                ring.pop_front();
            }
            ring.push_back(pos);
        }
    }

    pub fn count(&self, class: AnomalyClass) -> u64 {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn counts(&self) -> impl Iterator<Item = (AnomalyClass, u64)> + '_ {
        self.counts.iter().map(|(c, n)| (*c, *n))
    }

    pub fn samples(&self, class: AnomalyClass) -> impl Iterator<Item = &SourcePos> {
        self.samples.get(&class).into_iter().flatten()
    }

    /// Adds another report's counters; samples are appended in order.
    pub fn merge(&mut self, other: &AnomalyReport) {
        for (class, n) in &other.counts {
            *self.counts.entry(*class).or_insert(0) += n;
        }
        for (class, ring) in &other.samples {
            for pos in ring {
                let mine = self.samples.entry(*class).or_default();
                if mine.len() == SAMPLE_RING {
                    mine.pop_front();
                }
                mine.push_back(*pos);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::TraceTable;

    #[test]
    fn ring_is_bounded_and_counts_keep_growing() {
        let mut r = AnomalyReport::new();
        for i in 0..250 {
            r.record(
                AnomalyClass::BadFieldFormat,
                Some(SourcePos::new(TraceTable::TaskEvents, 0, i)),
            );
        }
        assert_eq!(r.count(AnomalyClass::BadFieldFormat), 250);
        let kept: Vec<_> = r.samples(AnomalyClass::BadFieldFormat).collect();
        assert_eq!(kept.len(), SAMPLE_RING);
        assert_eq!(kept[0].line, 150);
    }

    #[test]
    fn serde_round_trip() {
        let mut r = AnomalyReport::new();
        r.record(AnomalyClass::UnknownNode, None);
        r.record(
            AnomalyClass::MissingField,
            Some(SourcePos::new(TraceTable::TaskUsage, 2, 9)),
        );
        let json = serde_json::to_string(&r).unwrap();
        let back: AnomalyReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = AnomalyReport::new();
        a.record(AnomalyClass::UnknownTask, None);
        let mut b = AnomalyReport::new();
        b.record(AnomalyClass::UnknownTask, None);
        b.record(AnomalyClass::OutOfOrder, None);
        a.merge(&b);
        assert_eq!(a.count(AnomalyClass::UnknownTask), 2);
        assert_eq!(a.total(), 3);
    }
}
