//! Decoder-only language model with optional hybrid (gated cross-attention)
//! layers at configurable depths.

mod attention;
mod layer;
mod model;

pub use attention::{multi_head_attention, AttentionOutput};
pub use layer::{CrossAttention, DecoderLayer, HybridTrace};
pub use model::{sequence, LanguageModel, VisualBridge};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Shape of the token-wise gate `g_d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GateMode {
    /// One tanh gate per text token, broadcast over channels.
    #[default]
    Token,
    /// One tanh gate per token and channel.
    Channel,
}

/// Where the cross-attention queries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum QuerySource {
    /// Reuse the self-attention query projection.
    #[default]
    SelfAttention,
    /// A dedicated cross-attention query projection.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LmConfig {
    /// Filled from the dataset vocabulary when omitted from a config file.
    #[cfg_attr(feature = "serde", serde(default))]
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub hybrid_indices: Vec<usize>,
    pub max_seq_len: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub gate: GateMode,
    #[cfg_attr(feature = "serde", serde(default))]
    pub cross_query: QuerySource,
    /// Also prepend bridged visual tokens to the text sequence.
    #[cfg_attr(feature = "serde", serde(default))]
    pub visual_prefix: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 0,
            d: 32,
            n_layers: 4,
            n_heads: 4,
            d_ff: 64,
            hybrid_indices: vec![0, 2],
            max_seq_len: 96,
            gate: GateMode::Token,
            cross_query: QuerySource::SelfAttention,
            visual_prefix: false,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d == 0
            || self.n_layers == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config(
                "language model sizes must be positive".into(),
            ));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if let Some(&bad) = self.hybrid_indices.iter().find(|&&i| i >= self.n_layers) {
            return Err(Error::Config(format!(
                "hybrid index {bad} is outside 0..{}",
                self.n_layers
            )));
        }
        if self.hybrid_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "hybrid_indices must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn is_hybrid(&self, layer: usize) -> bool {
        self.hybrid_indices.contains(&layer)
    }

    pub fn base_layer_params(&self) -> usize {
        let (d, f) = (self.d, self.d_ff);
        4 * d + 4 * d * d + f * d + f + d * f + d
    }

    /// Parameters a hybrid layer adds on top of a standard one.
    pub fn cross_params(&self) -> usize {
        let d = self.d;
        let q = match self.cross_query {
            QuerySource::SelfAttention => 0,
            QuerySource::Separate => d * d,
        };
        let gate = match self.gate {
            GateMode::Token => d + 1,
            GateMode::Channel => d * d + d,
        };
        3 * d * d + q + gate + 1
    }

    pub fn base_params(&self) -> usize {
        let (v, d) = (self.vocab_size, self.d);
        v * d + self.max_seq_len * d + self.n_layers * self.base_layer_params() + 2 * d + v * d + v
    }

    pub fn bridge_params(&self, d_visual: usize) -> usize {
        self.d * d_visual + self.d
    }
}
