use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{DecoderLayer, LmConfig};
use crate::error::{Error, Result};
use crate::param::{linear_weight, ones, uniform, ParamId, ParamStore};
use crate::peft::{AdaptableMatrix, AdapterSet, LmMatrix};
use crate::tape::{Session, Var};
use crate::tensor::{Mask, Tensor};
use crate::vocab::{BOS, EOS, SEP};

/// Linear map from encoder width to language-model width.
#[derive(Debug, Clone)]
pub struct VisualBridge {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl VisualBridge {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d_visual: usize,
        d: usize,
    ) -> Result<Self> {
        Ok(VisualBridge {
            weight: store.add("bridge.weight", linear_weight(rng, d, d_visual), true)?,
            bias: store.add("bridge.bias", Tensor::zeros(&[d]), true)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, visual: Var) -> Result<Var> {
        s.linear(visual, self.weight, Some(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl LanguageModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &LmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (v, d) = (cfg.vocab_size, cfg.d);
        let tok_emb = store.add("lm.tok_emb", uniform(rng, &[v, d], 0.1), true)?;
        let pos_emb = store.add(
            "lm.pos_emb",
            uniform(rng, &[cfg.max_seq_len, d], 0.02),
            true,
        )?;
        let layers = (0..cfg.n_layers)
            .map(|i| DecoderLayer::new(store, rng, cfg, i))
            .collect::<Result<Vec<_>>>()?;
        let final_gain = store.add("lm.final_norm.gain", ones(d), true)?;
        let final_bias = store.add("lm.final_norm.bias", Tensor::zeros(&[d]), true)?;
        let head_weight = store.add("lm.head.weight", linear_weight(rng, v, d), true)?;
        let head_bias = store.add("lm.head.bias", Tensor::zeros(&[v]), true)?;
        Ok(LanguageModel {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_gain,
            final_bias,
            head_weight,
            head_bias,
        })
    }

    /// Every parameter that is not part of a hybrid layer's cross branch.
    pub fn base_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            ids.extend(l.base_param_ids());
        }
        ids.extend([
            self.final_gain,
            self.final_bias,
            self.head_weight,
            self.head_bias,
        ]);
        ids
    }

    pub fn cross_param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| l.cross.as_ref())
            .flat_map(|c| c.param_ids())
            .collect()
    }

    /// Warm-up scalars `g_s` of the hybrid layers, in depth order.
    pub fn warmup_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| l.cross.as_ref().map(|c| c.warmup))
            .collect()
    }

    pub fn adaptable(&self, m: LmMatrix) -> Vec<AdaptableMatrix> {
        self.layers
            .iter()
            .map(|l| AdaptableMatrix::whole(l.matrix(m)))
            .collect()
    }

    /// Logits `[T × V]` for `tokens`. `visual` holds bridged visual tokens
    /// `[m × d]`; hybrid layers cross-attend to them and, with
    /// `visual_prefix`, they are also prepended to the sequence.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        tokens: &[usize],
        visual: Option<Var>,
    ) -> Result<Var> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Contract("empty token sequence".into()));
        }
        let prefix = match visual {
            Some(v) if self.cfg.visual_prefix => s.tape.shape(v)[0],
            _ => 0,
        };
        let total = prefix + t;
        if total > self.cfg.max_seq_len {
            return Err(Error::Contract(alloc::format!(
                "sequence length {total} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        let table = s.param(self.tok_emb);
        let mut h = s.tape.embedding(table, tokens)?;
        if prefix > 0 {
            h = s
                .tape
                .concat_rows(&[visual.expect("prefix implies visual"), h])?;
        }
        let pos = s.param(self.pos_emb);
        let pos = s.tape.narrow_rows(pos, 0, total)?;
        h = s.tape.add(h, pos)?;
        let mask = Mask::causal(total);
        for layer in &self.layers {
            h = match (visual, layer.cross.is_some()) {
                (Some(v), true) => layer.hybrid_layer(s, &self.cfg, h, v, &mask)?,
                _ => layer.standard_layer(s, &self.cfg, h, &mask)?,
            };
        }
        let g = s.param(self.final_gain);
        let b = s.param(self.final_bias);
        h = s.tape.layer_norm(h, g, b, 1e-5)?;
        if prefix > 0 {
            h = s.tape.narrow_rows(h, prefix, t)?;
        }
        s.linear(h, self.head_weight, Some(self.head_bias))
    }

    /// Logits for `[BOS] prompt [SEP] report`; row `i` predicts token `i + 1`.
    pub fn lm_forward(
        &self,
        s: &mut Session<'_>,
        prompt: &[usize],
        report: &[usize],
        visual: Option<Var>,
    ) -> Result<Var> {
        let seq = sequence(prompt, report);
        self.forward(s, &seq, visual)
    }

    /// Greedy decoding after `[BOS] prompt [SEP]`. Ties go to the lowest id.
    /// Stops after EOS (included), `max_len` tokens or a full context.
    pub fn greedy_decode(
        &self,
        params: &ParamStore,
        adapters: &AdapterSet,
        prompt: &[usize],
        visual: Option<&Tensor>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut context = sequence(prompt, &[]);
        let prefix = match visual {
            Some(v) if self.cfg.visual_prefix => v.shape()[0],
            _ => 0,
        };
        let mut out = Vec::new();
        while out.len() < max_len && prefix + context.len() < self.cfg.max_seq_len {
            let mut s = Session::new(params, adapters);
            let vis = visual.map(|v| s.tape.constant(v.clone()));
            let logits = self.forward(&mut s, &context, vis)?;
            let l = s.tape.value(logits);
            let row = l.row(context.len() - 1);
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            out.push(best);
            context.push(best);
            if best == EOS {
                break;
            }
        }
        Ok(out)
    }
}

/// `[BOS] prompt [SEP] report`.
pub fn sequence(prompt: &[usize], report: &[usize]) -> Vec<usize> {
    let mut seq = Vec::with_capacity(prompt.len() + report.len() + 2);
    seq.push(BOS);
    seq.extend_from_slice(prompt);
    seq.push(SEP);
    seq.extend_from_slice(report);
    seq
}
