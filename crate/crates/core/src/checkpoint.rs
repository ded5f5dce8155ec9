//! Versioned JSON checkpoints of parameters and optimiser state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::AdamState;

pub const CHECKPOINT_FORMAT: &str = "topicnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    pub config_hash: String,
    pub seed: u64,
    pub split_seed: u64,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: ModelParams,
        adam: AdamState,
        step: u64,
        epoch: usize,
        batch_in_epoch: usize,
        config_hash: String,
        seed: u64,
        split_seed: u64,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_sizes: params.arch.layer_sizes.clone(),
            params,
            adam,
            step,
            epoch,
            batch_in_epoch,
            config_hash,
            seed,
            split_seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format '{}'", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.layer_sizes != self.params.arch.layer_sizes {
            return Err(Error::Checkpoint("layer sizes disagree with the stored parameters".into()));
        }
        self.params.validate().map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Writes through a temporary file so an interrupted save never
    /// replaces the previous checkpoint with a partial one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
