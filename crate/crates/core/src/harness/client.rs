use std::io::BufReader;
use std::net::{TcpStream, ToSocketAddrs};

use crate::model::WorkloadEvent;
use crate::state::{ContextData, PlacementOutcome};

use super::greedy::{greedy_schedule, placement_neutral};
use super::protocol::{
    read_line, write_message, ClientRole, ControlCommand, ProtocolError, ProtocolMessage,
    SchedulerDecision, PROTOCOL_VERSION,
};

/// Summary of a finished scheduler session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionSummary {
    pub ticks: u64,
    pub decisions_sent: u64,
    pub placed: u64,
    pub refused: u64,
    pub bye_reason: Option<String>,
}

/// Scheduler side of the wire protocol. Keeps a mirror of the cluster state
/// built from the received batches and its own accepted placements.
pub struct SchedulerClient {
    id: String,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    mirror: ContextData,
}

impl SchedulerClient {
    pub fn connect(addr: impl ToSocketAddrs, scheduler_id: impl Into<String>) -> Result<Self, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        let id = scheduler_id.into();
        write_message(
            &mut writer,
            &ProtocolMessage::Hello {
                scheduler_id: id.clone(),
                protocol_version: PROTOCOL_VERSION,
                role: ClientRole::Scheduler,
            },
        )?;
        Ok(SchedulerClient {
            id,
            reader: BufReader::new(stream),
            writer,
            mirror: ContextData::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn mirror(&self) -> &ContextData {
        &self.mirror
    }

    /// Serves ticks until the server says bye or closes the connection.
    /// Lines that fail to parse end the session with an error.
    pub fn run<F>(&mut self, mut decide: F) -> Result<SessionSummary, ProtocolError>
    where
        F: FnMut(&ContextData, &str) -> Vec<SchedulerDecision>,
    {
        self.run_with_events(|view, id, _| decide(view, id))
    }

    /// Like [`run`](Self::run), also passing the tick's events.
    pub fn run_with_events<F>(&mut self, mut decide: F) -> Result<SessionSummary, ProtocolError>
    where
        F: FnMut(&ContextData, &str, &[WorkloadEvent]) -> Vec<SchedulerDecision>,
    {
        let mut summary = SessionSummary::default();
        let mut buf = Vec::new();
        loop {
            if read_line(&mut self.reader, &mut buf)?.is_none() {
                return Ok(summary);
            }
            match ProtocolMessage::decode(&buf)? {
                ProtocolMessage::EventBatch { epoch, sim_time, events } => {
                    for e in &events {
                        self.mirror.apply_event(e);
                    }
                    self.mirror.finish_epoch(sim_time);
                    let decisions = decide(&self.mirror, &self.id, &events);
                    summary.ticks += 1;
                    summary.decisions_sent += decisions.len() as u64;
                    write_message(&mut self.writer, &ProtocolMessage::Decisions { epoch, decisions })?;
                }
                ProtocolMessage::DecisionResults { results, .. } => {
                    for r in results {
                        match r.outcome {
                            PlacementOutcome::Placed => {
                                summary.placed += 1;
                                self.mirror.place_task(r.task, r.node);
                            }
                            PlacementOutcome::Refused(_) => summary.refused += 1,
                        }
                    }
                }
                ProtocolMessage::Bye { reason } => {
                    summary.bye_reason = reason;
                    return Ok(summary);
                }
                _ => {}
            }
        }
    }

    /// Runs the greedy policy against the mirrored state.
    pub fn run_greedy(&mut self) -> Result<SessionSummary, ProtocolError> {
        let mut idle = false;
        self.run_with_events(|view, id, events| {
            if idle && placement_neutral(events) {
                return Vec::new();
            }
            let decisions = greedy_schedule(view, id);
            idle = decisions.is_empty();
            decisions
        })
    }
}

/// Control side of the wire protocol.
pub struct ControlClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl ControlClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        write_message(
            &mut writer,
            &ProtocolMessage::Hello {
                scheduler_id: "control".into(),
                protocol_version: PROTOCOL_VERSION,
                role: ClientRole::Control,
            },
        )?;
        Ok(ControlClient {
            reader: BufReader::new(stream),
            writer,
        })
    }

    pub fn send(&mut self, command: ControlCommand) -> Result<ProtocolMessage, ProtocolError> {
        write_message(&mut self.writer, &ProtocolMessage::Control { command })?;
        super::protocol::read_message(&mut self.reader)
    }
}
