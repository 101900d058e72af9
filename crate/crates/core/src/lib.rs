//! Trace-driven cluster workload simulator.
//!
//! Replays Google cluster-data (2011 schema) traces as a deterministic stream
//! of timestamped workload events, keeps a concurrently readable view of the
//! cluster, and feeds pluggable schedulers in-process or over a
//! newline-delimited JSON protocol.
//!
//! The main pieces, in data-flow order:
//!
//! - [`parser`]: gzip/CSV table readers, typed decoding, action-to-event mapping
//!   and anomaly accounting.
//! - [`pipeline`]: bounded per-table event buffers filled by worker threads and
//!   merged into tick batches in a fixed total order.
//! - [`state`]: the cluster state store, placement, utilization and snapshots.
//! - [`engine`]: the tick loop with pacing, pause/resume and stats.
//! - [`harness`]: scheduler fan-out, the wire protocol and a greedy reference
//!   scheduler.
//! - [`toolkit`]: synthetic trace generation and the compiled event log.

pub mod digest;
pub mod engine;
pub mod harness;
pub mod model;
pub mod parser;
pub mod pipeline;
pub mod state;
pub mod toolkit;

pub use digest::Digest;
pub use model::{
    eval_constraint, task_eligible, EventPayload, MachineId, NodeRecord, RequestedResources,
    SimTime, TaskConstraint, TaskId, TaskRecord, UsageSample, WorkloadEvent,
};
