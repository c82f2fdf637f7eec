use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::network::Network;
use crate::error::{Error, Result};
use crate::real::Real;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Network parameters, optimizer moments and the epoch counter, stored as a
/// versioned JSON document. Floats are written in shortest round-trip form,
/// so a save/load cycle is lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct Checkpoint<S> {
    pub format_version: u32,
    pub precision: String,
    pub epoch: usize,
    pub network: Network<S>,
    pub adam: AdamState<S>,
}

impl<S: Real> Checkpoint<S> {
    pub fn new(network: Network<S>, adam: AdamState<S>, epoch: usize) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            precision: S::NAME.to_string(),
            epoch,
            network,
            adam,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let precision = value.get("precision").and_then(|v| v.as_str()).unwrap_or_default();
        if precision != S::NAME {
            return Err(Error::InvalidConfig(format!(
                "checkpoint holds {precision} parameters, expected {}",
                S::NAME
            )));
        }
        Ok(serde_json::from_value(value)?)
    }
}
