//! Versioned JSON snapshots of a trained learner.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Learner, RunConfig};
use crate::model::{FeatureExtractor, Mlp};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub learner: Learner,
}

impl Checkpoint {
    pub fn new(config: RunConfig, seed: u64, learner: Learner) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed,
            config,
            learner,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Parses and validates a checkpoint; gradient buffers are recreated.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut ck: Self = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let fe_norm = ck.learner.extractor.normalizes();
        let fe = ck.learner.extractor.mlp();
        let mlp = Mlp::from_params(fe.widths().to_vec(), fe.params().clone())?;
        ck.learner.extractor = FeatureExtractor::from_mlp(mlp).with_normalization(fe_norm);
        ck.learner.otmm.restore_grads()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
