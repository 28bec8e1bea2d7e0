//! Versioned, checksummed stage checkpoints.
//!
//! Layout: `HMCK`, u32 LE format version, u64 LE payload length, bincode
//! payload, SHA-256 of the payload.

use std::path::Path;

use hmnas_core::finetune::FinetuneState;
use hmnas_core::masker::{HierMasks, MaskState};
use hmnas_core::searchspace::{ArchParams, BinaryMasks, SearchSpaceSpec, Supernet, Weights};
use hmnas_core::trainer::TrainState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::metrics::MetricsRow;

pub const MAGIC: &[u8; 4] = b"HMCK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    Supernet,
    Masks,
    Final,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::Supernet => "supernet",
            StageTag::Masks => "masks",
            StageTag::Final => "final",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StageState {
    Supernet(TrainState),
    Masks { masks: HierMasks, state: MaskState },
    Final { masks: BinaryMasks, state: FinetuneState, target_loss: Option<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: StageTag,
    /// Settings that produced this checkpoint; resuming requires a match.
    pub fingerprint: String,
    pub epochs_done: usize,
    pub epochs_total: usize,
    pub spec: SearchSpaceSpec,
    pub arch: ArchParams,
    pub weights: Weights,
    pub state: StageState,
    /// Metrics rows written so far; the stage CSV is regenerated from these.
    pub metrics: Vec<MetricsRow>,
}

impl Checkpoint {
    pub fn is_complete(&self) -> bool {
        self.epochs_done >= self.epochs_total
    }

    pub fn supernet(&self) -> Result<Supernet> {
        Ok(Supernet::from_parts(self.spec.clone(), self.arch.clone(), self.weights.clone())?)
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let payload = bincode::serialize(ck).expect("checkpoint types serialize");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err("not a checkpoint file (bad magic or header)".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format!("incompatible checkpoint format version {version}, this build reads version {FORMAT_VERSION}"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != HEADER_LEN + len + DIGEST_LEN {
        return Err(format!(
            "integrity check failed: expected {} bytes, file has {}",
            HEADER_LEN + len + DIGEST_LEN,
            bytes.len()
        ));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
    if Sha256::digest(payload).as_slice() != &bytes[HEADER_LEN + len..] {
        return Err("integrity check failed: checksum mismatch".into());
    }
    bincode::deserialize(payload).map_err(|e| format!("integrity check failed: {e}"))
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn write_atomic(ck: &Checkpoint, path: &Path) -> std::io::Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, encode(ck))?;
    std::fs::rename(&tmp, path)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(ck, path).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|message| CliError::Checkpoint { path: path.to_path_buf(), message })
}
