//! Snapshot serialization.
//!
//! File layout, all integers little-endian:
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 16    | magic `TRACESIMSNAPSHOT`                 |
//! | 4     | format version (currently 1)             |
//! | 8     | payload length `n`                       |
//! | n     | payload: compact JSON of [`Snapshot`]    |
//! | 32    | SHA-256 of the payload                   |
//!
//! The payload encoding is canonical (ordered maps, fixed field order), so
//! the payload digest doubles as the state digest used for determinism
//! checks.

use std::fs;
use std::io::Write;
use std::path::Path;

use im::{OrdMap, OrdSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;
use crate::model::{MachineId, NodeRecord, SimTime, TaskId, TaskRecord, TaskState};
use crate::parser::AnomalyReport;

use super::context::{ContextData, Counters};

pub const SNAPSHOT_MAGIC: &[u8; 16] = b"TRACESIMSNAPSHOT";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot refused while the engine is {0}")]
    SnapshotWhileRunning(String),
    #[error("not a snapshot file")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u32),
    #[error("snapshot truncated")]
    Truncated,
    #[error("snapshot digest mismatch")]
    DigestMismatch,
    #[error("inconsistent snapshot contents: {0}")]
    Inconsistent(String),
    #[error("snapshot encoding error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A full image of the cluster state at a tick boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub sim_time: SimTime,
    pub config_digest: Digest,
    pub trace_digest: Digest,
    pub context: ContextData,
}

impl Snapshot {
    pub fn new(context: ContextData, config_digest: Digest, trace_digest: Digest) -> Self {
        Snapshot {
            sim_time: context.sim_time(),
            config_digest,
            trace_digest,
            context,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("snapshot serialization cannot fail")
    }

    /// SHA-256 of the canonical payload.
    pub fn digest(&self) -> Digest {
        Digest::of(&self.payload())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(payload.len() + 60);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Digest::of(&payload).0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SnapshotError> {
        if bytes.len() < 28 {
            return Err(SnapshotError::Truncated);
        }
        if &bytes[..16] != SNAPSHOT_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::UnsupportedVersion(version));
        }
        let len = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
        let end = 28usize.checked_add(len).ok_or(SnapshotError::Truncated)?;
        if bytes.len() < end + 32 {
            return Err(SnapshotError::Truncated);
        }
        let payload = &bytes[28..end];
        if Digest::of(payload).0[..] != bytes[end..end + 32] {
            return Err(SnapshotError::DigestMismatch);
        }
        Ok(serde_json::from_slice(payload)?)
    }

    /// Writes the snapshot and returns its digest.
    pub fn write_to(&self, path: &Path) -> Result<Digest, SnapshotError> {
        let bytes = self.to_bytes();
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(Digest::of(&bytes[28..bytes.len() - 32]))
    }

    pub fn read_from(path: &Path) -> Result<Self, SnapshotError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Serialized form of [`ContextData`]. Placements are derived from task
/// states on load rather than stored twice.
#[derive(Serialize, Deserialize)]
struct ContextDto {
    epoch: u64,
    sim_time: SimTime,
    next_seq: u64,
    counters: Counters,
    nodes: Vec<NodeRecord>,
    tasks: Vec<TaskRecord>,
    pending: Vec<(u64, TaskId)>,
    anomalies: AnomalyReport,
}

impl Serialize for ContextData {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ContextDto {
            epoch: self.epoch,
            sim_time: self.sim_time,
            next_seq: self.next_seq,
            counters: self.counters,
            nodes: self.nodes.values().cloned().collect(),
            tasks: self.tasks.values().cloned().collect(),
            pending: self.pending.iter().map(|(k, v)| (*k, *v)).collect(),
            anomalies: self.anomalies.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ContextData {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let dto = ContextDto::deserialize(d)?;
        from_dto(dto).map_err(serde::de::Error::custom)
    }
}

fn from_dto(dto: ContextDto) -> Result<ContextData, SnapshotError> {
    let nodes: OrdMap<MachineId, NodeRecord> = dto.nodes.into_iter().map(|n| (n.id, n)).collect();
    let mut placements: OrdMap<MachineId, OrdSet<TaskId>> = OrdMap::new();
    let mut tasks = OrdMap::new();
    for t in dto.tasks {
        if let TaskState::Running(m) = t.state {
            placements.entry(m).or_default().insert(t.id);
        }
        tasks.insert(t.id, t);
    }
    let pending: OrdMap<u64, TaskId> = dto.pending.iter().copied().collect();
    let pending_seq: OrdMap<TaskId, u64> = dto.pending.iter().map(|(k, v)| (*v, *k)).collect();
    let ctx = ContextData {
        nodes,
        tasks,
        pending,
        pending_seq,
        placements,
        next_seq: dto.next_seq,
        epoch: dto.epoch,
        sim_time: dto.sim_time,
        counters: dto.counters,
        anomalies: dto.anomalies,
    };
    ctx.audit().map_err(SnapshotError::Inconsistent)?;
    Ok(ctx)
}
