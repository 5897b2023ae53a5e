//! Run configuration shared by every command, and content hashing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::reasoning::ModelConfig;
use crate::scene::LoadOptions;
use crate::train::TrainConfig;
use crate::world::WorldConfig;

/// Everything a pipeline run depends on. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Number of seeds `experiment` sweeps over, starting at `world.seed`.
    pub experiment_seeds: usize,
    pub strict: bool,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            experiment_seeds: 3,
            strict: false,
            workers: None,
        }
    }
}

impl RunConfig {
    /// Reads a JSON config file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            n_obj: self.world.n_obj,
            n_rel: self.world.n_rel,
            strict: self.strict,
        }
    }
}

/// SHA-256 of the compact JSON encoding of `value`, hex encoded.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    hash_bytes(&bytes)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
