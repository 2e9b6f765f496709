use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{multi_head_attention, GateMode, LmConfig, QuerySource};
use crate::error::{Error, Result};
use crate::param::{linear_weight, ones, ParamId, ParamStore};
use crate::peft::LmMatrix;
use crate::tape::{Session, Var};
use crate::tensor::{Mask, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Parameters that turn a standard layer into a hybrid one.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: Option<ParamId>,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// `[1 × d]` (token gate) or `[d × d]` (channel gate).
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    /// Warm-up scalar `g_s`, zero at creation.
    pub warmup: ParamId,
}

impl CrossAttention {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = alloc::vec![
            self.wk,
            self.wv,
            self.wo,
            self.gate_weight,
            self.gate_bias,
            self.warmup
        ];
        v.extend(self.wq);
        v
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    /// Pre-attention norm; in a hybrid layer it is shared by text and visual tokens.
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub ff_up: ParamId,
    pub ff_up_bias: ParamId,
    pub ff_down: ParamId,
    pub ff_down_bias: ParamId,
    pub cross: Option<CrossAttention>,
}

/// Intermediate values of one hybrid-layer pass.
pub struct HybridTrace {
    pub out: Var,
    /// `X′`, the projected cross-attention output.
    pub cross_out: Var,
    /// `g_d`, `[n × 1]` or `[n × d]`.
    pub gate: Var,
    /// Per-head cross-attention weights `[n × m]`.
    pub cross_weights: Vec<Var>,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &LmConfig,
        index: usize,
    ) -> Result<Self> {
        let (d, f) = (cfg.d, cfg.d_ff);
        let p = format!("lm.layer{index}");
        let mut add = |name: &str, t: Tensor| store.add(&format!("{p}.{name}"), t, true);
        let norm1_gain = add("norm1.gain", ones(d))?;
        let norm1_bias = add("norm1.bias", Tensor::zeros(&[d]))?;
        let wq = add("attn.q", linear_weight(rng, d, d))?;
        let wk = add("attn.k", linear_weight(rng, d, d))?;
        let wv = add("attn.v", linear_weight(rng, d, d))?;
        let wo = add("attn.o", linear_weight(rng, d, d))?;
        let norm2_gain = add("norm2.gain", ones(d))?;
        let norm2_bias = add("norm2.bias", Tensor::zeros(&[d]))?;
        let ff_up = add("ffn.up", linear_weight(rng, f, d))?;
        let ff_up_bias = add("ffn.up_bias", Tensor::zeros(&[f]))?;
        let ff_down = add("ffn.down", linear_weight(rng, d, f))?;
        let ff_down_bias = add("ffn.down_bias", Tensor::zeros(&[d]))?;
        let cross = if cfg.is_hybrid(index) {
            let wq = match cfg.cross_query {
                QuerySource::SelfAttention => None,
                QuerySource::Separate => Some(add("cross.q", linear_weight(rng, d, d))?),
            };
            let wk = add("cross.k", linear_weight(rng, d, d))?;
            let wv = add("cross.v", linear_weight(rng, d, d))?;
            let wo = add("cross.o", linear_weight(rng, d, d))?;
            let gate_rows = match cfg.gate {
                GateMode::Token => 1,
                GateMode::Channel => d,
            };
            let gate_weight = add("cross.gate.weight", linear_weight(rng, gate_rows, d))?;
            let gate_bias = add("cross.gate.bias", Tensor::zeros(&[gate_rows]))?;
            let warmup = add("cross.warmup", Tensor::scalar(0.0))?;
            Some(CrossAttention {
                wq,
                wk,
                wv,
                wo,
                gate_weight,
                gate_bias,
                warmup,
            })
        } else {
            None
        };
        Ok(DecoderLayer {
            norm1_gain,
            norm1_bias,
            wq,
            wk,
            wv,
            wo,
            norm2_gain,
            norm2_bias,
            ff_up,
            ff_up_bias,
            ff_down,
            ff_down_bias,
            cross,
        })
    }

    /// Base (non-cross) parameters.
    pub fn base_param_ids(&self) -> [ParamId; 12] {
        [
            self.norm1_gain,
            self.norm1_bias,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.norm2_gain,
            self.norm2_bias,
            self.ff_up,
            self.ff_up_bias,
            self.ff_down,
            self.ff_down_bias,
        ]
    }

    pub fn matrix(&self, m: LmMatrix) -> ParamId {
        match m {
            LmMatrix::Query => self.wq,
            LmMatrix::Key => self.wk,
            LmMatrix::Value => self.wv,
            LmMatrix::Output => self.wo,
        }
    }

    fn norm1(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.norm1_gain);
        let b = s.param(self.norm1_bias);
        s.tape.layer_norm(x, g, b, NORM_EPS)
    }

    /// Causal self-attention over normalised `xn`; returns `(output, queries)`.
    fn self_attention(
        &self,
        s: &mut Session<'_>,
        cfg: &LmConfig,
        xn: Var,
        mask: &Mask,
    ) -> Result<(Var, Var)> {
        let n = s.tape.shape(xn)[0];
        if mask.dims() != (n, n) {
            let (r, c) = mask.dims();
            return Err(Error::dim("decoder mask", &[n, n], &[r, c]));
        }
        let q = s.linear(xn, self.wq, None)?;
        let k = s.linear(xn, self.wk, None)?;
        let v = s.linear(xn, self.wv, None)?;
        let att = multi_head_attention(&mut s.tape, q, k, v, cfg.n_heads, mask)?;
        let out = s.linear(att.out, self.wo, None)?;
        Ok((out, q))
    }

    fn feed_forward_residual(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let g = s.param(self.norm2_gain);
        let b = s.param(self.norm2_bias);
        let hn = s.tape.layer_norm(h, g, b, NORM_EPS)?;
        let up = s.linear(hn, self.ff_up, Some(self.ff_up_bias))?;
        let act = s.tape.silu(up)?;
        let down = s.linear(act, self.ff_down, Some(self.ff_down_bias))?;
        s.tape.add(h, down)
    }

    /// Pre-norm causal self-attention and feed-forward, each with a residual.
    pub fn standard_layer(
        &self,
        s: &mut Session<'_>,
        cfg: &LmConfig,
        x: Var,
        mask: &Mask,
    ) -> Result<Var> {
        let xn = self.norm1(s, x)?;
        let (sa, _) = self.self_attention(s, cfg, xn, mask)?;
        let h = s.tape.add(x, sa)?;
        self.feed_forward_residual(s, h)
    }

    /// Hybrid decoder layer over text `x[n × d]` and bridged visual tokens
    /// `visual[m × d]`:
    ///
    /// ```text
    /// X′ = W_o^x · MHCA(Q_t, W_k·V_s, W_v·V_s)
    /// h  = x + SelfAttn(x) + (X′ ⊙ g_d) · g_s,   g_d = tanh(gate(x_n))
    /// ```
    ///
    /// With `g_s = 0` this is bit-identical to [`DecoderLayer::standard_layer`].
    pub fn hybrid_layer(
        &self,
        s: &mut Session<'_>,
        cfg: &LmConfig,
        x: Var,
        visual: Var,
        mask: &Mask,
    ) -> Result<Var> {
        Ok(self.hybrid_layer_traced(s, cfg, x, visual, mask)?.out)
    }

    pub fn hybrid_layer_traced(
        &self,
        s: &mut Session<'_>,
        cfg: &LmConfig,
        x: Var,
        visual: Var,
        mask: &Mask,
    ) -> Result<HybridTrace> {
        let cross = self
            .cross
            .as_ref()
            .ok_or_else(|| Error::Config("layer has no cross-attention / warm-up scalar".into()))?;
        let (n, _) = s.tape.value(x).dims2()?;
        let (m, _) = s.tape.value(visual).dims2()?;
        if m == 0 {
            return Err(Error::Contract(
                "hybrid layer needs at least one visual token".into(),
            ));
        }
        let xn = self.norm1(s, x)?;
        let vs = self.norm1(s, visual)?;
        let (sa, q_self) = self.self_attention(s, cfg, xn, mask)?;
        let q = match cross.wq {
            Some(wq) => s.linear(xn, wq, None)?,
            None => q_self,
        };
        let k = s.linear(vs, cross.wk, None)?;
        let v = s.linear(vs, cross.wv, None)?;
        let att = multi_head_attention(&mut s.tape, q, k, v, cfg.n_heads, &Mask::full(n, m))?;
        let cross_out = s.linear(att.out, cross.wo, None)?;

        let gate = s.linear(xn, cross.gate_weight, Some(cross.gate_bias))?;
        let gate = s.tape.tanh(gate)?;
        let gated = match cfg.gate {
            GateMode::Token => s.tape.mul_rows(cross_out, gate)?,
            GateMode::Channel => s.tape.mul(cross_out, gate)?,
        };
        let warmup = s.param(cross.warmup);
        let scaled = s.tape.mul(gated, warmup)?;

        let h = s.tape.add(x, sa)?;
        let h = s.tape.add(h, scaled)?;
        let out = self.feed_forward_residual(s, h)?;
        Ok(HybridTrace {
            out,
            cross_out,
            gate,
            cross_weights: att.weights,
        })
    }
}
