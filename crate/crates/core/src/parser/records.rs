//! Typed records for each table, decoded from [`RawRecord`]s.
//!
//! Every record can be encoded back into a CSV line; the synthetic trace
//! generator writes its files through the same encoders, so
//! `encode(decode(parse(line))) == line` holds for generated data.

use std::fmt::Write as _;

use crate::model::{
    ConstraintOp, MachineId, NodeCapacity, RequestedResources, SimTime, TaskConstraint, TaskId,
    UsageSample,
};

use super::{AnomalyClass, RawRecord, SourcePos, TaskAction, TraceTable};

type Decoded<T> = Result<T, AnomalyClass>;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEventRecord {
    pub timestamp: SimTime,
    pub missing_info: Option<u64>,
    pub task: TaskId,
    pub machine: Option<MachineId>,
    pub action: TaskAction,
    pub user: Option<String>,
    pub scheduling_class: u8,
    pub priority: u8,
    pub requested: RequestedResources,
    pub different_machines: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MachineEventKind {
    Add,
    Remove,
    Update,
}

impl MachineEventKind {
    fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(MachineEventKind::Add),
            1 => Some(MachineEventKind::Remove),
            2 => Some(MachineEventKind::Update),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            MachineEventKind::Add => 0,
            MachineEventKind::Remove => 1,
            MachineEventKind::Update => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineEventRecord {
    pub timestamp: SimTime,
    pub machine: MachineId,
    pub kind: MachineEventKind,
    pub platform_id: Option<String>,
    pub capacity: NodeCapacity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineAttributeRecord {
    pub timestamp: SimTime,
    pub machine: MachineId,
    pub name: String,
    pub value: Option<String>,
    pub deleted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobEventRecord {
    pub timestamp: SimTime,
    pub missing_info: Option<u64>,
    pub job_id: u64,
    pub action: TaskAction,
    pub user: Option<String>,
    pub scheduling_class: Option<u8>,
    pub job_name: Option<String>,
    pub logical_job_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskConstraintRecord {
    pub timestamp: SimTime,
    pub task: TaskId,
    pub constraint: TaskConstraint,
    /// The trace may leave the value empty; kept so the line re-encodes as read.
    pub value_absent: bool,
}

/// A usage line: the sample itself plus the three trailing sampling columns.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageRecord {
    pub sample: UsageSample,
    pub sample_portion: Option<f64>,
    pub aggregation_type: Option<u8>,
    pub sampled_cpu_usage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecodedRecord {
    MachineEvent(MachineEventRecord),
    MachineAttribute(MachineAttributeRecord),
    JobEvent(JobEventRecord),
    TaskEvent(TaskEventRecord),
    TaskConstraint(TaskConstraintRecord),
    TaskUsage(UsageRecord),
}

impl DecodedRecord {
    pub fn table(&self) -> TraceTable {
        match self {
            DecodedRecord::MachineEvent(_) => TraceTable::MachineEvents,
            DecodedRecord::MachineAttribute(_) => TraceTable::MachineAttributes,
            DecodedRecord::JobEvent(_) => TraceTable::JobEvents,
            DecodedRecord::TaskEvent(_) => TraceTable::TaskEvents,
            DecodedRecord::TaskConstraint(_) => TraceTable::TaskConstraints,
            DecodedRecord::TaskUsage(_) => TraceTable::TaskUsage,
        }
    }

    pub fn timestamp(&self) -> SimTime {
        match self {
            DecodedRecord::MachineEvent(r) => r.timestamp,
            DecodedRecord::MachineAttribute(r) => r.timestamp,
            DecodedRecord::JobEvent(r) => r.timestamp,
            DecodedRecord::TaskEvent(r) => r.timestamp,
            DecodedRecord::TaskConstraint(r) => r.timestamp,
            DecodedRecord::TaskUsage(r) => r.sample.start,
        }
    }

    /// Entity part of the merge tie-break: (job, task index) or (machine, 0).
    pub fn entity(&self) -> (u64, u64) {
        match self {
            DecodedRecord::MachineEvent(r) => (r.machine.0, 0),
            DecodedRecord::MachineAttribute(r) => (r.machine.0, 0),
            DecodedRecord::JobEvent(r) => (r.job_id, 0),
            DecodedRecord::TaskEvent(r) => (r.task.job_id, r.task.task_index),
            DecodedRecord::TaskConstraint(r) => (r.task.job_id, r.task.task_index),
            DecodedRecord::TaskUsage(r) => (r.sample.task.job_id, r.sample.task.task_index),
        }
    }

    /// CSV line without the trailing newline.
    pub fn encode(&self) -> String {
        let mut w = LineWriter::default();
        match self {
            DecodedRecord::MachineEvent(r) => {
                w.u64(r.timestamp.0)
                    .u64(r.machine.0)
                    .u64(r.kind.code() as u64)
                    .opt_str(r.platform_id.as_deref())
                    .opt_f64(r.capacity.cpu)
                    .opt_f64(r.capacity.memory);
            }
            DecodedRecord::MachineAttribute(r) => {
                w.u64(r.timestamp.0)
                    .u64(r.machine.0)
                    .str(&r.name)
                    .opt_str(r.value.as_deref())
                    .bool(r.deleted);
            }
            DecodedRecord::JobEvent(r) => {
                w.u64(r.timestamp.0)
                    .opt_u64(r.missing_info)
                    .u64(r.job_id)
                    .u64(r.action.code() as u64)
                    .opt_str(r.user.as_deref())
                    .opt_u64(r.scheduling_class.map(u64::from))
                    .opt_str(r.job_name.as_deref())
                    .opt_str(r.logical_job_name.as_deref());
            }
            DecodedRecord::TaskEvent(r) => {
                w.u64(r.timestamp.0)
                    .opt_u64(r.missing_info)
                    .u64(r.task.job_id)
                    .u64(r.task.task_index)
                    .opt_u64(r.machine.map(|m| m.0))
                    .u64(r.action.code() as u64)
                    .opt_str(r.user.as_deref())
                    .u64(r.scheduling_class as u64)
                    .u64(r.priority as u64)
                    .opt_f64(r.requested.cpu)
                    .opt_f64(r.requested.memory)
                    .opt_f64(r.requested.disk_space)
                    .opt_bool(r.different_machines);
            }
            DecodedRecord::TaskConstraint(r) => {
                let value = if r.value_absent { None } else { Some(r.constraint.value.as_str()) };
                w.u64(r.timestamp.0)
                    .u64(r.task.job_id)
                    .u64(r.task.task_index)
                    .u64(r.constraint.op.code() as u64)
                    .str(&r.constraint.attribute_name)
                    .opt_str(value);
            }
            DecodedRecord::TaskUsage(r) => {
                let s = &r.sample;
                w.u64(s.start.0)
                    .u64(s.end.0)
                    .u64(s.task.job_id)
                    .u64(s.task.task_index)
                    .u64(s.machine.0)
                    .opt_f64(s.cpu_rate)
                    .opt_f64(s.canonical_memory)
                    .opt_f64(s.assigned_memory)
                    .opt_f64(s.unmapped_page_cache)
                    .opt_f64(s.total_page_cache)
                    .opt_f64(s.max_memory)
                    .opt_f64(s.disk_io_time)
                    .opt_f64(s.local_disk_space)
                    .opt_f64(s.max_cpu_rate)
                    .opt_f64(s.max_disk_io_time)
                    .opt_f64(s.cycles_per_instruction)
                    .opt_f64(s.memory_accesses_per_instruction)
                    .opt_f64(r.sample_portion)
                    .opt_u64(r.aggregation_type.map(u64::from))
                    .opt_f64(r.sampled_cpu_usage);
            }
        }
        w.finish()
    }
}

#[derive(Default)]
struct LineWriter {
    buf: String,
    first: bool,
}

impl LineWriter {
    fn sep(&mut self) {
        if self.first {
            self.buf.push(',');
        }
        self.first = true;
    }

    fn u64(&mut self, v: u64) -> &mut Self {
        self.sep();
        let _ = write!(self.buf, "{v}");
        self
    }

    fn opt_u64(&mut self, v: Option<u64>) -> &mut Self {
        self.sep();
        if let Some(v) = v {
            let _ = write!(self.buf, "{v}");
        }
        self
    }

    fn opt_f64(&mut self, v: Option<f64>) -> &mut Self {
        self.sep();
        if let Some(v) = v {
            let _ = write!(self.buf, "{v}");
        }
        self
    }

    fn str(&mut self, v: &str) -> &mut Self {
        self.sep();
        self.buf.push_str(v);
        self
    }

    fn opt_str(&mut self, v: Option<&str>) -> &mut Self {
        self.sep();
        if let Some(v) = v {
            self.buf.push_str(v);
        }
        self
    }

    fn bool(&mut self, v: bool) -> &mut Self {
        self.sep();
        self.buf.push(if v { '1' } else { '0' });
        self
    }

    fn opt_bool(&mut self, v: Option<bool>) -> &mut Self {
        match v {
            Some(b) => self.bool(b),
            None => {
                self.sep();
                self
            }
        }
    }

    fn finish(self) -> String {
        self.buf
    }
}

fn req_u64(r: &RawRecord, i: usize) -> Decoded<u64> {
    r.field(i)
        .ok_or(AnomalyClass::MissingField)?
        .parse()
        .map_err(|_| AnomalyClass::BadFieldFormat)
}

fn opt_u64(r: &RawRecord, i: usize) -> Decoded<Option<u64>> {
    r.field(i)
        .map(|s| s.parse().map_err(|_| AnomalyClass::BadFieldFormat))
        .transpose()
}

fn small_int(v: u64, max: u8) -> Decoded<u8> {
    if v <= max as u64 {
        Ok(v as u8)
    } else {
        Err(AnomalyClass::BadFieldFormat)
    }
}

fn opt_real(r: &RawRecord, i: usize, upper: Option<f64>) -> Decoded<Option<f64>> {
    let Some(s) = r.field(i) else {
        return Ok(None);
    };
    let v: f64 = s.parse().map_err(|_| AnomalyClass::BadFieldFormat)?;
    if !v.is_finite() || v < 0.0 || upper.is_some_and(|u| v > u) {
        return Err(AnomalyClass::BadFieldFormat);
    }
    Ok(Some(v))
}

/// Normalized resource fraction in [0, 1].
fn opt_fraction(r: &RawRecord, i: usize) -> Decoded<Option<f64>> {
    opt_real(r, i, Some(1.0))
}

/// Non-negative measurement; no upper bound (CPI and friends can be absurd).
fn opt_measure(r: &RawRecord, i: usize) -> Decoded<Option<f64>> {
    opt_real(r, i, None)
}

fn parse_bool(s: &str) -> Decoded<bool> {
    match s {
        "0" | "false" | "FALSE" => Ok(false),
        "1" | "true" | "TRUE" => Ok(true),
        _ => Err(AnomalyClass::BadFieldFormat),
    }
}

fn opt_str(r: &RawRecord, i: usize) -> Option<String> {
    r.field(i).map(str::to_owned)
}

fn expect_table(r: &RawRecord, table: TraceTable) -> Decoded<()> {
    if r.table == table {
        Ok(())
    } else {
        Err(AnomalyClass::SchemaMismatch)
    }
}

fn action(code: u64) -> Decoded<TaskAction> {
    u8::try_from(code)
        .ok()
        .and_then(TaskAction::from_code)
        .ok_or(AnomalyClass::BadFieldFormat)
}

pub fn decode_task_event(r: &RawRecord) -> Decoded<TaskEventRecord> {
    expect_table(r, TraceTable::TaskEvents)?;
    Ok(TaskEventRecord {
        timestamp: SimTime(req_u64(r, 0)?),
        missing_info: opt_u64(r, 1)?,
        task: TaskId::new(req_u64(r, 2)?, req_u64(r, 3)?),
        machine: opt_u64(r, 4)?.map(MachineId),
        action: action(req_u64(r, 5)?)?,
        user: opt_str(r, 6),
        scheduling_class: small_int(req_u64(r, 7)?, 3)?,
        priority: small_int(req_u64(r, 8)?, 11)?,
        requested: RequestedResources {
            cpu: opt_fraction(r, 9)?,
            memory: opt_fraction(r, 10)?,
            disk_space: opt_fraction(r, 11)?,
        },
        different_machines: r.field(12).map(parse_bool).transpose()?,
    })
}

pub fn decode_machine_event(r: &RawRecord) -> Decoded<MachineEventRecord> {
    expect_table(r, TraceTable::MachineEvents)?;
    Ok(MachineEventRecord {
        timestamp: SimTime(req_u64(r, 0)?),
        machine: MachineId(req_u64(r, 1)?),
        kind: MachineEventKind::from_code(req_u64(r, 2)?).ok_or(AnomalyClass::BadFieldFormat)?,
        platform_id: opt_str(r, 3),
        capacity: NodeCapacity {
            cpu: opt_fraction(r, 4)?,
            memory: opt_fraction(r, 5)?,
        },
    })
}

pub fn decode_machine_attribute(r: &RawRecord) -> Decoded<MachineAttributeRecord> {
    expect_table(r, TraceTable::MachineAttributes)?;
    Ok(MachineAttributeRecord {
        timestamp: SimTime(req_u64(r, 0)?),
        machine: MachineId(req_u64(r, 1)?),
        name: r.field(2).ok_or(AnomalyClass::MissingField)?.to_owned(),
        value: opt_str(r, 3),
        deleted: parse_bool(r.field(4).ok_or(AnomalyClass::MissingField)?)?,
    })
}

pub fn decode_job_event(r: &RawRecord) -> Decoded<JobEventRecord> {
    expect_table(r, TraceTable::JobEvents)?;
    Ok(JobEventRecord {
        timestamp: SimTime(req_u64(r, 0)?),
        missing_info: opt_u64(r, 1)?,
        job_id: req_u64(r, 2)?,
        action: action(req_u64(r, 3)?)?,
        user: opt_str(r, 4),
        scheduling_class: opt_u64(r, 5)?.map(|c| small_int(c, 3)).transpose()?,
        job_name: opt_str(r, 6),
        logical_job_name: opt_str(r, 7),
    })
}

pub fn decode_task_constraint(r: &RawRecord) -> Decoded<TaskConstraintRecord> {
    expect_table(r, TraceTable::TaskConstraints)?;
    let op = u8::try_from(req_u64(r, 3)?)
        .ok()
        .and_then(ConstraintOp::from_code)
        .ok_or(AnomalyClass::BadFieldFormat)?;
    let name = r.field(4).ok_or(AnomalyClass::MissingField)?;
    let value = r.field(5);
    Ok(TaskConstraintRecord {
        timestamp: SimTime(req_u64(r, 0)?),
        task: TaskId::new(req_u64(r, 1)?, req_u64(r, 2)?),
        constraint: TaskConstraint::new(name, op, value.unwrap_or("")),
        value_absent: value.is_none(),
    })
}

pub fn decode_task_usage(r: &RawRecord) -> Decoded<UsageRecord> {
    expect_table(r, TraceTable::TaskUsage)?;
    let start = SimTime(req_u64(r, 0)?);
    let end = SimTime(req_u64(r, 1)?);
    if end <= start {
        return Err(AnomalyClass::BadFieldFormat);
    }
    let sample = UsageSample {
        start,
        end,
        task: TaskId::new(req_u64(r, 2)?, req_u64(r, 3)?),
        machine: MachineId(req_u64(r, 4)?),
        cpu_rate: opt_measure(r, 5)?,
        canonical_memory: opt_measure(r, 6)?,
        assigned_memory: opt_measure(r, 7)?,
        unmapped_page_cache: opt_measure(r, 8)?,
        total_page_cache: opt_measure(r, 9)?,
        max_memory: opt_measure(r, 10)?,
        disk_io_time: opt_measure(r, 11)?,
        local_disk_space: opt_measure(r, 12)?,
        max_cpu_rate: opt_measure(r, 13)?,
        max_disk_io_time: opt_measure(r, 14)?,
        cycles_per_instruction: opt_measure(r, 15)?,
        memory_accesses_per_instruction: opt_measure(r, 16)?,
    };
    Ok(UsageRecord {
        sample,
        sample_portion: opt_measure(r, 17)?,
        aggregation_type: opt_u64(r, 18)?.map(|v| small_int(v, u8::MAX)).transpose()?,
        sampled_cpu_usage: opt_measure(r, 19)?,
    })
}

/// Dispatches on the record's table.
pub fn decode(r: &RawRecord) -> Decoded<DecodedRecord> {
    Ok(match r.table {
        TraceTable::MachineEvents => DecodedRecord::MachineEvent(decode_machine_event(r)?),
        TraceTable::MachineAttributes => DecodedRecord::MachineAttribute(decode_machine_attribute(r)?),
        TraceTable::JobEvents => DecodedRecord::JobEvent(decode_job_event(r)?),
        TraceTable::TaskEvents => DecodedRecord::TaskEvent(decode_task_event(r)?),
        TraceTable::TaskConstraints => DecodedRecord::TaskConstraint(decode_task_constraint(r)?),
        TraceTable::TaskUsage => DecodedRecord::TaskUsage(decode_task_usage(r)?),
    })
}

/// Absent numeric fields that feed capacity arithmetic. Counted once per
/// record by the table reader; the record itself is still used.
pub(crate) fn has_absent_resources(rec: &DecodedRecord) -> bool {
    match rec {
        DecodedRecord::TaskEvent(r) => {
            matches!(
                r.action,
                TaskAction::Submit | TaskAction::UpdatePending | TaskAction::UpdateRunning
            ) && r.requested.has_absent()
        }
        DecodedRecord::MachineEvent(r) => r.kind != MachineEventKind::Remove && r.capacity.has_absent(),
        _ => false,
    }
}

/// Parses and decodes one line in a single step.
pub fn parse_and_decode(table: TraceTable, line: &str, pos: SourcePos) -> Decoded<DecodedRecord> {
    let raw = super::parse_line(table, line, pos)?;
    decode(&raw)
}
