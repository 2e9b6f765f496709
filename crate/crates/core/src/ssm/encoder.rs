use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{patchify_embed, EncoderConfig, MambaBlock};
use crate::error::{Error, Result};
use crate::param::{linear_weight, ones, uniform, ParamId, ParamStore};
use crate::peft::{AdaptableMatrix, AdapterSet, AdapterTarget};
use crate::tape::{Session, Var};
use crate::tensor::Tensor;

/// Token features handed from the encoder to the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    /// `[N × d_model]`
    pub tokens: Tensor,
    /// Fingerprint of the encoder configuration that produced them.
    pub provenance: u64,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub position: ParamId,
    pub blocks: Vec<MambaBlock>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
}

impl VisionEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch();
        let patch_weight = store.add(
            "encoder.patch.weight",
            linear_weight(rng, p.d_model, p.patch_dim()),
            true,
        )?;
        let patch_bias = store.add("encoder.patch.bias", Tensor::zeros(&[p.d_model]), true)?;
        let position = store.add(
            "encoder.pos",
            uniform(rng, &[p.n_tokens(), p.d_model], 0.02),
            true,
        )?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| MambaBlock::new(store, rng, cfg, &format!("encoder.block{i}")))
            .collect::<Result<Vec<_>>>()?;
        let final_gain = store.add("encoder.final_norm.gain", ones(cfg.d_model), true)?;
        let final_bias = store.add(
            "encoder.final_norm.bias",
            Tensor::zeros(&[cfg.d_model]),
            true,
        )?;
        Ok(VisionEncoder {
            cfg: cfg.clone(),
            patch_weight,
            patch_bias,
            position,
            blocks,
            final_gain,
            final_bias,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.patch_weight, self.patch_bias, self.position];
        for b in &self.blocks {
            ids.push(b.norm_gain);
            ids.push(b.norm_bias);
            ids.extend(b.fwd.param_ids());
            ids.extend(b.bwd.param_ids());
        }
        ids.push(self.final_gain);
        ids.push(self.final_bias);
        ids
    }

    /// Patch embedding, every block in order, then a final layer norm.
    pub fn forward(&self, s: &mut Session<'_>, image: Var) -> Result<Var> {
        let mut h = patchify_embed(
            s,
            image,
            &self.cfg.patch(),
            self.patch_weight,
            self.patch_bias,
            self.position,
        )?;
        for block in &self.blocks {
            h = block.forward(s, &self.cfg, h)?;
        }
        let g = s.param(self.final_gain);
        let b = s.param(self.final_bias);
        s.tape.layer_norm(h, g, b, 1e-5)
    }

    /// Gradient-free encoding of one image.
    pub fn encode(
        &self,
        params: &ParamStore,
        adapters: &AdapterSet,
        image: &Tensor,
    ) -> Result<VisualFeatures> {
        let mut s = Session::new(params, adapters);
        let img = s.tape.constant(image.clone());
        let out = self.forward(&mut s, img)?;
        Ok(VisualFeatures {
            tokens: s.tape.value(out).clone(),
            provenance: self.cfg.fingerprint(),
        })
    }

    /// Matrices an adapter target resolves to: every block, both directions.
    pub fn adaptable(&self, target: AdapterTarget) -> Result<Vec<AdaptableMatrix>> {
        if target == AdapterTarget::Embedding {
            return Ok(alloc::vec![AdaptableMatrix::whole(self.patch_weight)]);
        }
        let mut out = Vec::new();
        for b in &self.blocks {
            for dir in [&b.fwd, &b.bwd] {
                match dir.adaptable(&self.cfg, target) {
                    Some(m) => out.push(m),
                    None => {
                        return Err(Error::Config(format!("{target} is not an encoder matrix")))
                    }
                }
            }
        }
        Ok(out)
    }
}
