//! Domain types shared by every stage of the simulator.
//!
//! Everything here is an immutable value type. Identifiers are newtypes over
//! the integer ids found in the trace; resource quantities are the trace's
//! normalized fractions, with `None` standing for a field that was absent in
//! the source record (never silently zero).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Microseconds since the trace epoch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MICROS_PER_SECOND: u64 = 1_000_000;

    pub const fn from_secs(secs: u64) -> Self {
        SimTime(secs * Self::MICROS_PER_SECOND)
    }

    pub const fn micros(self) -> u64 {
        self.0
    }

    pub fn saturating_add(self, micros: u64) -> Self {
        SimTime(self.0.saturating_add(micros))
    }

    pub fn saturating_sub(self, micros: u64) -> Self {
        SimTime(self.0.saturating_sub(micros))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Unique task key: a job id plus the task's index within the job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub job_id: u64,
    pub task_index: u64,
}

impl TaskId {
    pub const fn new(job_id: u64, task_index: u64) -> Self {
        TaskId { job_id, task_index }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.job_id, self.task_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MachineId(pub u64);

impl fmt::Display for MachineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Requested resources, normalized to the largest machine in the trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestedResources {
    pub cpu: Option<f64>,
    pub memory: Option<f64>,
    pub disk_space: Option<f64>,
}

impl RequestedResources {
    pub const fn new(cpu: f64, memory: f64, disk_space: f64) -> Self {
        RequestedResources {
            cpu: Some(cpu),
            memory: Some(memory),
            disk_space: Some(disk_space),
        }
    }

    pub fn has_absent(&self) -> bool {
        self.cpu.is_none() || self.memory.is_none() || self.disk_space.is_none()
    }

    /// Absent fields count as zero here; callers aggregate through this.
    pub fn as_vector(&self) -> ResourceVector {
        ResourceVector {
            cpu: self.cpu.unwrap_or(0.0),
            memory: self.memory.unwrap_or(0.0),
            disk_space: self.disk_space.unwrap_or(0.0),
        }
    }
}

/// Machine capacity as reported by machine events. GCD does not report disk
/// capacity, so only cpu and memory are tracked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeCapacity {
    pub cpu: Option<f64>,
    pub memory: Option<f64>,
}

impl NodeCapacity {
    pub const fn new(cpu: f64, memory: f64) -> Self {
        NodeCapacity {
            cpu: Some(cpu),
            memory: Some(memory),
        }
    }

    pub fn has_absent(&self) -> bool {
        self.cpu.is_none() || self.memory.is_none()
    }
}

/// Dense resource triple used for arithmetic.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ResourceVector {
    pub cpu: f64,
    pub memory: f64,
    pub disk_space: f64,
}

impl std::ops::AddAssign for ResourceVector {
    fn add_assign(&mut self, rhs: Self) {
        self.cpu += rhs.cpu;
        self.memory += rhs.memory;
        self.disk_space += rhs.disk_space;
    }
}

/// One measured usage window for a task.
///
/// CPI and MAI are kept even when implausible; the trace is known to contain
/// out-of-range micro-architecture counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSample {
    pub start: SimTime,
    pub end: SimTime,
    pub task: TaskId,
    pub machine: MachineId,
    pub cpu_rate: Option<f64>,
    pub canonical_memory: Option<f64>,
    pub assigned_memory: Option<f64>,
    pub unmapped_page_cache: Option<f64>,
    pub total_page_cache: Option<f64>,
    pub max_memory: Option<f64>,
    pub disk_io_time: Option<f64>,
    pub local_disk_space: Option<f64>,
    pub max_cpu_rate: Option<f64>,
    pub max_disk_io_time: Option<f64>,
    pub cycles_per_instruction: Option<f64>,
    pub memory_accesses_per_instruction: Option<f64>,
}

impl UsageSample {
    /// A sample with every measurement absent.
    pub fn empty(start: SimTime, end: SimTime, task: TaskId, machine: MachineId) -> Self {
        UsageSample {
            start,
            end,
            task,
            machine,
            cpu_rate: None,
            canonical_memory: None,
            assigned_memory: None,
            unmapped_page_cache: None,
            total_page_cache: None,
            max_memory: None,
            disk_io_time: None,
            local_disk_space: None,
            max_cpu_rate: None,
            max_disk_io_time: None,
            cycles_per_instruction: None,
            memory_accesses_per_instruction: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConstraintOp {
    #[serde(rename = "EQ")]
    Eq,
    #[serde(rename = "NEQ")]
    Neq,
    #[serde(rename = "LT")]
    Lt,
    #[serde(rename = "GT")]
    Gt,
}

impl ConstraintOp {
    /// GCD wire code: 0 equal, 1 not equal, 2 less than, 3 greater than.
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ConstraintOp::Eq),
            1 => Some(ConstraintOp::Neq),
            2 => Some(ConstraintOp::Lt),
            3 => Some(ConstraintOp::Gt),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ConstraintOp::Eq => 0,
            ConstraintOp::Neq => 1,
            ConstraintOp::Lt => 2,
            ConstraintOp::Gt => 3,
        }
    }

    pub const ALL: [ConstraintOp; 4] = [
        ConstraintOp::Eq,
        ConstraintOp::Neq,
        ConstraintOp::Lt,
        ConstraintOp::Gt,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskConstraint {
    pub attribute_name: String,
    pub op: ConstraintOp,
    pub value: String,
}

impl TaskConstraint {
    pub fn new(attribute_name: impl Into<String>, op: ConstraintOp, value: impl Into<String>) -> Self {
        TaskConstraint {
            attribute_name: attribute_name.into(),
            op,
            value: value.into(),
        }
    }
}

/// Constraint changes carried by an `UpdateTaskConstraints` event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintDelta {
    Add(TaskConstraint),
    Remove(TaskConstraint),
}

pub type NodeAttributes = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "machine", rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Running(MachineId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: TaskId,
    pub priority: u8,
    pub scheduling_class: u8,
    pub requested: RequestedResources,
    pub constraints: BTreeSet<TaskConstraint>,
    pub state: TaskState,
    pub last_usage: Option<UsageSample>,
}

impl TaskRecord {
    pub fn pending(id: TaskId, priority: u8, scheduling_class: u8, requested: RequestedResources) -> Self {
        TaskRecord {
            id,
            priority,
            scheduling_class,
            requested,
            constraints: BTreeSet::new(),
            state: TaskState::Pending,
            last_usage: None,
        }
    }

    pub fn is_pending(&self) -> bool {
        matches!(self.state, TaskState::Pending)
    }

    pub fn running_on(&self) -> Option<MachineId> {
        match self.state {
            TaskState::Running(m) => Some(m),
            TaskState::Pending => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: MachineId,
    pub platform_id: String,
    pub capacity: NodeCapacity,
    pub attributes: NodeAttributes,
    pub online: bool,
}

impl NodeRecord {
    pub fn new(id: MachineId, platform_id: impl Into<String>, capacity: NodeCapacity) -> Self {
        NodeRecord {
            id,
            platform_id: platform_id.into(),
            capacity,
            attributes: NodeAttributes::new(),
            online: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalCause {
    Evict,
    Fail,
    Finish,
    Kill,
    Lost,
}

/// One immutable, timestamped cluster state change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadEvent {
    pub timestamp: SimTime,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    AddTask {
        task: TaskId,
        priority: u8,
        scheduling_class: u8,
        requested: RequestedResources,
        constraints: Vec<TaskConstraint>,
    },
    UpdateTaskRequiredResources {
        task: TaskId,
        requested: RequestedResources,
        priority: u8,
    },
    UpdateTaskUsedResources {
        sample: UsageSample,
    },
    UpdateTaskConstraints {
        task: TaskId,
        delta: ConstraintDelta,
    },
    RemoveTask {
        task: TaskId,
        cause: RemovalCause,
    },
    AddNode {
        node: NodeRecord,
    },
    UpdateNodeTotalResources {
        machine: MachineId,
        capacity: NodeCapacity,
    },
    AddNodeAttributes {
        machine: MachineId,
        attributes: Vec<(String, String)>,
    },
    RemoveNodeAttributes {
        machine: MachineId,
        names: Vec<String>,
    },
    RemoveNode {
        machine: MachineId,
    },
}

impl WorkloadEvent {
    pub fn new(timestamp: SimTime, payload: EventPayload) -> Self {
        WorkloadEvent { timestamp, payload }
    }

    /// The task this event refers to, if any.
    pub fn task(&self) -> Option<TaskId> {
        match &self.payload {
            EventPayload::AddTask { task, .. }
            | EventPayload::UpdateTaskRequiredResources { task, .. }
            | EventPayload::UpdateTaskConstraints { task, .. }
            | EventPayload::RemoveTask { task, .. } => Some(*task),
            EventPayload::UpdateTaskUsedResources { sample } => Some(sample.task),
            _ => None,
        }
    }

    /// The machine this event refers to, for node events.
    pub fn machine(&self) -> Option<MachineId> {
        match &self.payload {
            EventPayload::AddNode { node } => Some(node.id),
            EventPayload::UpdateNodeTotalResources { machine, .. }
            | EventPayload::AddNodeAttributes { machine, .. }
            | EventPayload::RemoveNodeAttributes { machine, .. }
            | EventPayload::RemoveNode { machine } => Some(*machine),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.payload {
            EventPayload::AddTask { .. } => "AddTask",
            EventPayload::UpdateTaskRequiredResources { .. } => "UpdateTaskRequiredResources",
            EventPayload::UpdateTaskUsedResources { .. } => "UpdateTaskUsedResources",
            EventPayload::UpdateTaskConstraints { .. } => "UpdateTaskConstraints",
            EventPayload::RemoveTask { .. } => "RemoveTask",
            EventPayload::AddNode { .. } => "AddNode",
            EventPayload::UpdateNodeTotalResources { .. } => "UpdateNodeTotalResources",
            EventPayload::AddNodeAttributes { .. } => "AddNodeAttributes",
            EventPayload::RemoveNodeAttributes { .. } => "RemoveNodeAttributes",
            EventPayload::RemoveNode { .. } => "RemoveNode",
        }
    }
}

fn parse_int(s: &str) -> Option<i128> {
    if s.is_empty() {
        return None;
    }
    s.parse::<i128>().ok()
}

/// Evaluates one constraint against a node's attributes.
///
/// A missing attribute compares as the empty string (or 0 when the other side
/// is numeric). `LT`/`GT` compare numerically when both sides parse as base-10
/// integers and fall back to byte-wise comparison otherwise.
pub fn eval_constraint(c: &TaskConstraint, attrs: &NodeAttributes) -> bool {
    let actual = attrs.get(&c.attribute_name).map(String::as_str).unwrap_or("");
    let ordering = || match (parse_int(actual), parse_int(&c.value)) {
        (Some(a), Some(b)) => a.cmp(&b),
        // absent attribute against a numeric operand reads as 0
        (None, Some(b)) if actual.is_empty() => 0i128.cmp(&b),
        _ => actual.as_bytes().cmp(c.value.as_bytes()),
    };
    match c.op {
        ConstraintOp::Eq => actual == c.value,
        ConstraintOp::Neq => actual != c.value,
        ConstraintOp::Lt => ordering().is_lt(),
        ConstraintOp::Gt => ordering().is_gt(),
    }
}

/// True iff every constraint holds on the node and the requested resources fit
/// in what the co-located tasks' requests leave free.
///
/// `allocated` is the sum of requested resources of tasks already running on
/// the node. Disk is not checked: machines report no disk capacity.
pub fn task_eligible(task: &TaskRecord, node: &NodeRecord, allocated: ResourceVector) -> bool {
    if !node.online {
        return false;
    }
    fits(task.requested.as_vector(), node.capacity, allocated)
        && task.constraints.iter().all(|c| eval_constraint(c, &node.attributes))
}

pub(crate) fn fits(request: ResourceVector, capacity: NodeCapacity, allocated: ResourceVector) -> bool {
    // small slack so that exact-fit sums of decimal fractions are not refused
    const EPS: f64 = 1e-9;
    let cpu_free = capacity.cpu.unwrap_or(0.0) - allocated.cpu;
    let mem_free = capacity.memory.unwrap_or(0.0) - allocated.memory;
    request.cpu <= cpu_free + EPS && request.memory <= mem_free + EPS
}
