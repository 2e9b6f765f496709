use alloc::vec::Vec;

use super::PatchEmbedConfig;
use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::tape::{Session, Var};

/// Splits a `[channels × H × W]` image into non-overlapping patches in
/// row-major patch order, projects each with the shared affine map
/// (a stride-`patch` convolution) and adds the position embedding.
pub fn patchify_embed(
    s: &mut Session<'_>,
    image: Var,
    cfg: &PatchEmbedConfig,
    weight: ParamId,
    bias: ParamId,
    position: ParamId,
) -> Result<Var> {
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if s.tape.shape(image) != expected {
        return Err(Error::dim("patchify_embed", s.tape.shape(image), &expected));
    }
    let (p, size, grid) = (cfg.patch_size, cfg.image_size, cfg.grid());
    let mut index = Vec::with_capacity(cfg.n_tokens() * cfg.patch_dim());
    for pr in 0..grid {
        for pc in 0..grid {
            for c in 0..cfg.channels {
                for i in 0..p {
                    for j in 0..p {
                        index.push(c * size * size + (pr * p + i) * size + pc * p + j);
                    }
                }
            }
        }
    }
    let patches = s
        .tape
        .rearrange(image, &[cfg.n_tokens(), cfg.patch_dim()], index)?;
    let tokens = s.linear(patches, weight, Some(bias))?;
    let pos = s.param(position);
    s.tape.add(tokens, pos)
}
