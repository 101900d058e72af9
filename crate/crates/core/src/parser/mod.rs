//! Reading GCD trace tables.
//!
//! A trace root holds one directory per table, each with lexicographically
//! ordered `part-NNNNN-of-NNNNN.csv.gz` files (plain `.csv` also works).
//! Lines go through three steps: [`parse_line`] splits and checks the field
//! count, the `decode_*` functions in [`records`] produce typed records, and
//! [`map_to_events`] turns a record into zero or more workload events.
//! Problems along the way are counted in an [`AnomalyReport`], never fatal.

mod anomaly;
mod filter;
mod mapping;
pub mod records;
mod source;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use anomaly::{AnomalyClass, AnomalyReport, SharedReport, SAMPLE_RING};
pub use filter::{anomaly_filter, Verdict};
pub use mapping::map_to_events;
pub use records::{
    decode, decode_job_event, decode_machine_attribute, decode_machine_event,
    decode_task_constraint, decode_task_event, decode_task_usage, DecodedRecord, JobEventRecord,
    MachineAttributeRecord, MachineEventKind, MachineEventRecord, TaskConstraintRecord,
    TaskEventRecord, UsageRecord,
};
pub use source::{list_table_files, trace_digest, TableSource};

/// The six GCD tables, declared in tie-break rank order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceTable {
    MachineEvents,
    MachineAttributes,
    JobEvents,
    TaskEvents,
    TaskConstraints,
    TaskUsage,
}

const MACHINE_EVENTS_COLUMNS: &[&str] = &[
    "timestamp",
    "machine_id",
    "event_type",
    "platform_id",
    "cpus",
    "memory",
];
const MACHINE_ATTRIBUTES_COLUMNS: &[&str] = &[
    "timestamp",
    "machine_id",
    "attribute_name",
    "attribute_value",
    "deleted",
];
const JOB_EVENTS_COLUMNS: &[&str] = &[
    "timestamp",
    "missing_info",
    "job_id",
    "event_type",
    "user",
    "scheduling_class",
    "job_name",
    "logical_job_name",
];
const TASK_EVENTS_COLUMNS: &[&str] = &[
    "timestamp",
    "missing_info",
    "job_id",
    "task_index",
    "machine_id",
    "event_type",
    "user",
    "scheduling_class",
    "priority",
    "cpu_request",
    "memory_request",
    "disk_space_request",
    "different_machines_restriction",
];
const TASK_CONSTRAINTS_COLUMNS: &[&str] = &[
    "timestamp",
    "job_id",
    "task_index",
    "comparison_operator",
    "attribute_name",
    "attribute_value",
];
const TASK_USAGE_COLUMNS: &[&str] = &[
    "start_time",
    "end_time",
    "job_id",
    "task_index",
    "machine_id",
    "cpu_rate",
    "canonical_memory_usage",
    "assigned_memory_usage",
    "unmapped_page_cache",
    "total_page_cache",
    "max_memory_usage",
    "disk_io_time",
    "local_disk_space_usage",
    "max_cpu_rate",
    "max_disk_io_time",
    "cycles_per_instruction",
    "memory_accesses_per_instruction",
    "sample_portion",
    "aggregation_type",
    "sampled_cpu_usage",
];

impl TraceTable {
    pub const ALL: [TraceTable; 6] = [
        TraceTable::MachineEvents,
        TraceTable::MachineAttributes,
        TraceTable::JobEvents,
        TraceTable::TaskEvents,
        TraceTable::TaskConstraints,
        TraceTable::TaskUsage,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            TraceTable::MachineEvents => "machine_events",
            TraceTable::MachineAttributes => "machine_attributes",
            TraceTable::JobEvents => "job_events",
            TraceTable::TaskEvents => "task_events",
            TraceTable::TaskConstraints => "task_constraints",
            TraceTable::TaskUsage => "task_usage",
        }
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            TraceTable::MachineEvents => MACHINE_EVENTS_COLUMNS,
            TraceTable::MachineAttributes => MACHINE_ATTRIBUTES_COLUMNS,
            TraceTable::JobEvents => JOB_EVENTS_COLUMNS,
            TraceTable::TaskEvents => TASK_EVENTS_COLUMNS,
            TraceTable::TaskConstraints => TASK_CONSTRAINTS_COLUMNS,
            TraceTable::TaskUsage => TASK_USAGE_COLUMNS,
        }
    }

    pub fn field_count(self) -> usize {
        self.columns().len()
    }
}

impl fmt::Display for TraceTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Task (and job) event type, with GCD wire codes 0..=8 in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskAction {
    Submit,
    Schedule,
    Evict,
    Fail,
    Finish,
    Kill,
    Lost,
    UpdatePending,
    UpdateRunning,
}

impl TaskAction {
    pub const ALL: [TaskAction; 9] = [
        TaskAction::Submit,
        TaskAction::Schedule,
        TaskAction::Evict,
        TaskAction::Fail,
        TaskAction::Finish,
        TaskAction::Kill,
        TaskAction::Lost,
        TaskAction::UpdatePending,
        TaskAction::UpdateRunning,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Where a line came from: table, index of the part file within the table,
/// and 1-based line number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourcePos {
    pub table: TraceTable,
    pub file: u32,
    pub line: u64,
}

impl SourcePos {
    pub fn new(table: TraceTable, file: u32, line: u64) -> Self {
        SourcePos { table, file, line }
    }
}

/// One CSV line split into fields; empty fields are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub table: TraceTable,
    pub fields: Vec<Option<String>>,
    pub source: SourcePos,
}

impl RawRecord {
    pub fn field(&self, i: usize) -> Option<&str> {
        self.fields.get(i).and_then(|f| f.as_deref())
    }
}

/// Splits one physical CSV line. The field count must match the table schema.
pub fn parse_line(table: TraceTable, line: &str, source: SourcePos) -> Result<RawRecord, AnomalyClass> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.is_empty() {
        return Err(AnomalyClass::SchemaMismatch);
    }
    let fields: Vec<Option<String>> = line
        .split(',')
        .map(|f| if f.is_empty() { None } else { Some(f.to_owned()) })
        .collect();
    if fields.len() != table.field_count() {
        return Err(AnomalyClass::SchemaMismatch);
    }
    Ok(RawRecord {
        table,
        fields,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(table: TraceTable) -> SourcePos {
        SourcePos::new(table, 0, 1)
    }

    #[test]
    fn task_event_line_with_absent_fields() {
        let line = "0,,3418309,0,,0,user1,2,9,0.125,0.07,0.0004,0";
        let r = parse_line(TraceTable::TaskEvents, line, pos(TraceTable::TaskEvents)).unwrap();
        assert_eq!(r.fields.len(), 13);
        assert_eq!(r.fields[1], None);
        assert_eq!(r.fields[4], None);
        assert_eq!(r.field(2), Some("3418309"));
    }

    #[test]
    fn empty_line_is_schema_mismatch() {
        assert_eq!(
            parse_line(TraceTable::MachineEvents, "", pos(TraceTable::MachineEvents)),
            Err(AnomalyClass::SchemaMismatch)
        );
    }

    #[test]
    fn short_usage_line_is_schema_mismatch() {
        let line = vec!["1"; 19].join(",");
        assert_eq!(
            parse_line(TraceTable::TaskUsage, &line, pos(TraceTable::TaskUsage)),
            Err(AnomalyClass::SchemaMismatch)
        );
        let line = vec!["1"; 20].join(",");
        assert!(parse_line(TraceTable::TaskUsage, &line, pos(TraceTable::TaskUsage)).is_ok());
    }

    #[test]
    fn crlf_is_stripped() {
        let r = parse_line(
            TraceTable::MachineEvents,
            "0,5,0,abc,0.5,0.25\r\n",
            pos(TraceTable::MachineEvents),
        )
        .unwrap();
        assert_eq!(r.field(5), Some("0.25"));
    }

    #[test]
    fn task_action_codes_are_bijective() {
        for (i, a) in TaskAction::ALL.iter().enumerate() {
            assert_eq!(a.code() as usize, i);
            assert_eq!(TaskAction::from_code(i as u8), Some(*a));
        }
        assert_eq!(TaskAction::from_code(9), None);
    }

    #[test]
    fn table_rank_order() {
        let mut sorted = TraceTable::ALL;
        sorted.sort();
        assert_eq!(sorted, TraceTable::ALL);
        assert!(TraceTable::MachineEvents < TraceTable::TaskEvents);
    }
}
