//! Run configuration, read from TOML.
//!
//! ```toml
//! dataset = "data/desk"
//! out = "runs/desk"
//!
//! [model]            # optional, defaults to the desk preset
//! init_seed = 0
//! [model.encoder]
//! image_size = 64
//! patch_size = 16
//! channels = 1
//! d_model = 64
//! n_blocks = 2
//! [model.lm]
//! d = 32
//! n_layers = 4
//! n_heads = 4
//! d_ff = 64
//! hybrid_indices = [0, 2]
//! max_seq_len = 96
//! [[model.adapters]]
//! target = "in_proj"
//! slice = "X"
//! rank = 4
//!
//! [train]            # optional, every key has a default
//! epochs = 6
//! pretrain_steps = 300
//! ```
//!
//! Unknown keys anywhere are rejected. `model.lm.vocab_size` may be left
//! out; it is filled from the training split.

use std::path::{Path, PathBuf};

use emrrg_core::train::TrainConfig;
use emrrg_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{read_string, AppError, Result};

fn desk_model() -> ModelConfig {
    ModelConfig::desk(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    #[serde(default = "desk_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative `dataset` and `out` paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&read_string(path)?).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if model.lm.vocab_size == 0 {
            model.lm.vocab_size = 1;
        }
        model
            .validate()
            .map_err(|e| AppError::Config(format!("model: {e}")))?;
        self.train
            .validate()
            .map_err(|e| AppError::Config(format!("train: {e}")))?;
        Ok(())
    }

    /// `--seed` drives both initialization and data order.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.init_seed = seed;
        self.train.seed = seed;
        self
    }

    /// Model config with the vocabulary size resolved.
    pub fn model_for_vocab(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        match m.lm.vocab_size {
            0 => m.lm.vocab_size = vocab_size,
            v if v != vocab_size => {
                return Err(AppError::Config(format!(
                    "model.lm.vocab_size = {v} but the training split yields {vocab_size}"
                )))
            }
            _ => {}
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
