//! Synthetic trace generation and the compiled event log.

pub mod eventlog;
pub mod generator;

pub use eventlog::{compile_trace, EventLog, EventLogError, LogSource, LogSummary};
pub use generator::{generate_trace, SyntheticSpec, TraceManifest, INJECTED_CLASSES, MANIFEST_FILE};
