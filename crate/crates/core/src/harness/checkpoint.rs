use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::policy::{OptimizerKind, OptimizerState, PolicyParams, PolicyShape};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Serialized policy plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub vocab_size: usize,
    #[serde(rename = "d")]
    pub embed_dim: usize,
    #[serde(rename = "M")]
    pub channels: usize,
    pub flat_params: Vec<f64>,
    pub optimizer_state: OptimizerState,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams, optimizer: &OptimizerState) -> Self {
        let shape = params.shape();
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            vocab_size: shape.vocab_size,
            embed_dim: shape.embed_dim,
            channels: shape.channels,
            flat_params: params.flat().to_vec(),
            optimizer_state: optimizer.clone(),
        }
    }

    /// A checkpoint with fresh optimizer state, as written after pretraining.
    pub fn params_only(params: &PolicyParams) -> Self {
        Self::new(params, &OptimizerState::new(OptimizerKind::Adam))
    }

    pub fn params(&self) -> Result<PolicyParams> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "checkpoint schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let shape = PolicyShape::new(self.vocab_size, self.embed_dim, self.channels);
        PolicyParams::from_flat(shape, self.flat_params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }
}
