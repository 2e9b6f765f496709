//! Vision encoder: patch embedding followed by bidirectional Mamba blocks.

mod block;
mod encoder;
mod patch;
mod scan;

pub use block::{MambaBlock, MambaDirection};
pub use encoder::{VisionEncoder, VisualFeatures};
pub use patch::patchify_embed;
pub use scan::selective_scan;

use alloc::format;

use crate::error::{Error, Result};
use crate::hash::Fnv64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
}

impl PatchEmbedConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count `(image_size / patch_size)²`.
    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length `channels · patch²`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.channels == 0 || self.d_model == 0 {
            return Err(Error::Config(
                "patch embedding sizes must be positive".into(),
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_d_state"))]
    pub d_state: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_expand"))]
    pub expand: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_conv_kernel"))]
    pub conv_kernel: usize,
    /// Defaults to `ceil(d_model / 16)`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub dt_rank: Option<usize>,
}

#[cfg(feature = "serde")]
fn default_d_state() -> usize {
    16
}
#[cfg(feature = "serde")]
fn default_expand() -> usize {
    2
}
#[cfg(feature = "serde")]
fn default_conv_kernel() -> usize {
    4
}

impl Default for EncoderConfig {
    /// Desk scale: 64×64 single-channel images, 16 tokens, width 64.
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 16,
            channels: 1,
            d_model: 64,
            n_blocks: 2,
            d_state: 16,
            expand: 2,
            conv_kernel: 4,
            dt_rank: None,
        }
    }
}

impl EncoderConfig {
    pub fn patch(&self) -> PatchEmbedConfig {
        PatchEmbedConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            d_model: self.d_model,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or(self.d_model.div_ceil(16))
    }

    pub fn n_tokens(&self) -> usize {
        self.patch().n_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        self.patch().validate()?;
        if self.d_state == 0 || self.expand == 0 || self.conv_kernel == 0 || self.dt_rank() == 0 {
            return Err(Error::Config(
                "encoder d_state, expand, conv_kernel and dt_rank must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for v in [
            self.image_size,
            self.patch_size,
            self.channels,
            self.d_model,
            self.n_blocks,
            self.d_state,
            self.expand,
            self.conv_kernel,
            self.dt_rank(),
        ] {
            h.write_u64(v as u64);
        }
        h.finish()
    }

    /// Parameters in one scan direction of one block.
    pub fn direction_params(&self) -> usize {
        let (dm, di, r, s, k) = (
            self.d_model,
            self.d_inner(),
            self.dt_rank(),
            self.d_state,
            self.conv_kernel,
        );
        2 * di * dm + di * k + (r + 2 * s) * di + di * r + di + di * s + di + dm * di
    }

    pub fn block_params(&self) -> usize {
        2 * self.d_model + 2 * self.direction_params()
    }

    pub fn total_params(&self) -> usize {
        let p = self.patch();
        p.d_model * p.patch_dim()
            + p.d_model
            + p.n_tokens() * p.d_model
            + self.n_blocks * self.block_params()
            + 2 * self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let paper = PatchEmbedConfig {
            image_size: 192,
            patch_size: 16,
            channels: 3,
            d_model: 1024,
        };
        assert_eq!(paper.n_tokens(), 144);
        assert_eq!(EncoderConfig::default().n_tokens(), 16);
        let bad = PatchEmbedConfig {
            image_size: 60,
            ..paper
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn derived_widths() {
        let c = EncoderConfig::default();
        assert_eq!(c.d_inner(), 128);
        assert_eq!(c.dt_rank(), 4);
        let small = EncoderConfig { d_model: 16, ..c };
        assert_eq!(small.dt_rank(), 1);
    }
}
