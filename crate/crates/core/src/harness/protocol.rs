//! Newline-delimited JSON wire protocol.
//!
//! Every message is one line of UTF-8 JSON with a `type` tag. A connection
//! opens with `hello`; schedulers then receive one `event_batch` per tick and
//! answer with `decisions` carrying the same epoch. Control clients send
//! `control` and get a `control_reply` (or `stats`) back.

use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MachineId, SimTime, TaskId, WorkloadEvent};
use crate::state::{PlacementOutcome, StatsSample};

pub const PROTOCOL_VERSION: u32 = 1;

/// Longest line accepted from a peer.
pub const MAX_LINE_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    #[default]
    Scheduler,
    Control,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchedulerDecision {
    pub task: TaskId,
    pub node: MachineId,
    pub scheduler_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecisionResult {
    pub task: TaskId,
    pub node: MachineId,
    pub outcome: PlacementOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ControlCommand {
    Pause,
    Resume,
    Speed { factor: f64 },
    Snapshot { path: String },
    Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProtocolMessage {
    Hello {
        scheduler_id: String,
        protocol_version: u32,
        #[serde(default)]
        role: ClientRole,
    },
    EventBatch {
        epoch: u64,
        sim_time: SimTime,
        events: Vec<WorkloadEvent>,
    },
    Decisions {
        epoch: u64,
        decisions: Vec<SchedulerDecision>,
    },
    DecisionResults {
        epoch: u64,
        results: Vec<DecisionResult>,
    },
    Control {
        command: ControlCommand,
    },
    ControlReply {
        ok: bool,
        state: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    Stats {
        sample: StatsSample,
    },
    Bye {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("line exceeds {MAX_LINE_BYTES} bytes")]
    LineTooLong,
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl ProtocolMessage {
    /// One JSON line including the trailing newline.
    pub fn encode(&self) -> Vec<u8> {
        let mut line = serde_json::to_vec(self).expect("protocol messages always serialize");
        line.push(b'\n');
        line
    }

    pub fn decode(line: &[u8]) -> Result<Self, ProtocolError> {
        let line = line.strip_suffix(b"\n").unwrap_or(line);
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        Ok(serde_json::from_slice(line)?)
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ProtocolMessage::Hello { .. } => "hello",
            ProtocolMessage::EventBatch { .. } => "event_batch",
            ProtocolMessage::Decisions { .. } => "decisions",
            ProtocolMessage::DecisionResults { .. } => "decision_results",
            ProtocolMessage::Control { .. } => "control",
            ProtocolMessage::ControlReply { .. } => "control_reply",
            ProtocolMessage::Stats { .. } => "stats",
            ProtocolMessage::Bye { .. } => "bye",
        }
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &ProtocolMessage) -> io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

/// Reads one raw line. `Ok(None)` on a clean end of stream.
pub fn read_line<R: BufRead>(r: &mut R, buf: &mut Vec<u8>) -> Result<Option<()>, ProtocolError> {
    buf.clear();
    let n = Read::take(&mut *r, MAX_LINE_BYTES as u64 + 1).read_until(b'\n', buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.len() > MAX_LINE_BYTES {
        return Err(ProtocolError::LineTooLong);
    }
    Ok(Some(()))
}

/// Reads and decodes one message; a closed stream is [`ProtocolError::Closed`].
pub fn read_message<R: BufRead>(r: &mut R) -> Result<ProtocolMessage, ProtocolError> {
    let mut buf = Vec::new();
    match read_line(r, &mut buf)? {
        Some(()) => ProtocolMessage::decode(&buf),
        None => Err(ProtocolError::Closed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::RefusalReason;

    #[test]
    fn hello_wire_format() {
        let m = ProtocolMessage::Hello {
            scheduler_id: "g".into(),
            protocol_version: 1,
            role: ClientRole::Scheduler,
        };
        let line = String::from_utf8(m.encode()).unwrap();
        assert_eq!(
            line,
            "{\"type\":\"hello\",\"scheduler_id\":\"g\",\"protocol_version\":1,\"role\":\"scheduler\"}\n"
        );
        // role may be omitted by simple clients
        let m2 = ProtocolMessage::decode(b"{\"type\":\"hello\",\"scheduler_id\":\"g\",\"protocol_version\":1}").unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn results_and_control_round_trip() {
        let msgs = vec![
            ProtocolMessage::DecisionResults {
                epoch: 3,
                results: vec![DecisionResult {
                    task: TaskId::new(1, 2),
                    node: MachineId(4),
                    outcome: PlacementOutcome::Refused(RefusalReason::Ineligible),
                }],
            },
            ProtocolMessage::Control {
                command: ControlCommand::Speed { factor: 75.0 },
            },
            ProtocolMessage::Bye { reason: None },
        ];
        for m in msgs {
            assert_eq!(ProtocolMessage::decode(&m.encode()).unwrap(), m);
        }
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(
            ProtocolMessage::decode(b"{\"type\":\"nope\"}"),
            Err(ProtocolError::Malformed(_))
        ));
    }
}
