//! Versioned, checksummed plan-state files.
//!
//! ```json
//! { "format": "gridplan-checkpoint", "version": 1, "checksum": "<sha256 hex>", "payload": { ... } }
//! ```
//!
//! The checksum covers the compact JSON encoding of `payload`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::planner::PlanState;
use crate::scalar::Scalar;

pub const FORMAT: &str = "gridplan-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("not a checkpoint file (format {0:?})")]
    Format(String),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    checksum: String,
    payload: serde_json::Value,
}

fn checksum(payload: &serde_json::Value) -> Result<String, serde_json::Error> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(payload)?)))
}

pub fn encode<T: Scalar>(state: &PlanState<T>) -> Result<String, CheckpointError> {
    let payload = serde_json::to_value(state)?;
    let env = Envelope {
        format: FORMAT.into(),
        version: VERSION,
        checksum: checksum(&payload)?,
        payload,
    };
    Ok(serde_json::to_string_pretty(&env)?)
}

pub fn decode<T: Scalar>(text: &str) -> Result<PlanState<T>, CheckpointError> {
    let env: Envelope = serde_json::from_str(text)?;
    if env.format != FORMAT {
        return Err(CheckpointError::Format(env.format));
    }
    if env.version != VERSION {
        return Err(CheckpointError::Version { found: env.version });
    }
    if checksum(&env.payload)? != env.checksum {
        return Err(CheckpointError::Checksum);
    }
    Ok(serde_json::from_value(env.payload)?)
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn save_checkpoint<T: Scalar>(state: &PlanState<T>, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = encode(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<PlanState<T>, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&text)
}
