use alloc::format;
use alloc::vec;

use rand::Rng;

use super::EncoderConfig;
use crate::error::Result;
use crate::param::{linear_weight, ones, uniform, ParamId, ParamStore};
use crate::peft::{AdaptableMatrix, FeatureSlice};
use crate::tape::{Session, Var};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Parameters of one scan direction.
#[derive(Debug, Clone)]
pub struct MambaDirection {
    /// `[2·d_inner × d_model]`: rows `0..d_inner` give X, the rest Z.
    pub in_proj: ParamId,
    /// `[d_inner × k]` depthwise causal kernel.
    pub conv: ParamId,
    /// `[(dt_rank + 2·d_state) × d_inner]`: dt, B, C row blocks in that order.
    pub x_proj: ParamId,
    /// `[d_inner × dt_rank]`
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
    /// `A = −exp(A_log)`, `[d_inner × d_state]`.
    pub a_log: ParamId,
    pub d_skip: ParamId,
    /// `[d_model × d_inner]`
    pub out_proj: ParamId,
}

impl MambaDirection {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &EncoderConfig,
        prefix: &str,
    ) -> Result<Self> {
        let (dm, di, r, ds, k) = (
            cfg.d_model,
            cfg.d_inner(),
            cfg.dt_rank(),
            cfg.d_state,
            cfg.conv_kernel,
        );
        let in_proj = store.add(
            &format!("{prefix}.in_proj"),
            linear_weight(rng, 2 * di, dm),
            true,
        )?;
        let conv = store.add(
            &format!("{prefix}.conv"),
            uniform(rng, &[di, k], 1.0 / libm::sqrt(k as f64)),
            true,
        )?;
        let x_proj = store.add(
            &format!("{prefix}.x_proj"),
            linear_weight(rng, r + 2 * ds, di),
            true,
        )?;
        let dt_proj = store.add(
            &format!("{prefix}.dt_proj"),
            linear_weight(rng, di, r),
            true,
        )?;
        // softplus(bias) log-uniform in [1e-3, 1e-1]
        let bias: alloc::vec::Vec<f64> = (0..di)
            .map(|_| {
                let u: f64 = rng.gen_range(0.0..1.0);
                let dt = libm::exp(libm::log(1e-3) + u * (libm::log(1e-1) - libm::log(1e-3)));
                dt + libm::log(-libm::expm1(-dt))
            })
            .collect();
        let dt_bias = store.add(
            &format!("{prefix}.dt_bias"),
            Tensor::new(&[di], bias)?,
            true,
        )?;
        let mut a = vec![0.0; di * ds];
        for c in 0..di {
            for s in 0..ds {
                a[c * ds + s] = libm::log((s + 1) as f64);
            }
        }
        let a_log = store.add(&format!("{prefix}.a_log"), Tensor::new(&[di, ds], a)?, true)?;
        let d_skip = store.add(&format!("{prefix}.d_skip"), ones(di), true)?;
        let out_proj = store.add(
            &format!("{prefix}.out_proj"),
            linear_weight(rng, dm, di),
            true,
        )?;
        Ok(MambaDirection {
            in_proj,
            conv,
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d_skip,
            out_proj,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        [
            self.in_proj,
            self.conv,
            self.x_proj,
            self.dt_proj,
            self.dt_bias,
            self.a_log,
            self.d_skip,
            self.out_proj,
        ]
    }

    /// One causal pass over `u[L × d_model]` (already normalised).
    pub fn forward(&self, s: &mut Session<'_>, cfg: &EncoderConfig, u: Var) -> Result<Var> {
        let (di, r, ds) = (cfg.d_inner(), cfg.dt_rank(), cfg.d_state);
        let xz = s.linear(u, self.in_proj, None)?;
        let x = s.tape.narrow_cols(xz, 0, di)?;
        let z = s.tape.narrow_cols(xz, di, di)?;
        let conv = s.param(self.conv);
        let x = s.tape.causal_conv1d(x, conv)?;
        let x = s.tape.silu(x)?;

        let dbc = s.linear(x, self.x_proj, None)?;
        let dt_raw = s.tape.narrow_cols(dbc, 0, r)?;
        let b = s.tape.narrow_cols(dbc, r, ds)?;
        let c = s.tape.narrow_cols(dbc, r + ds, ds)?;
        let dt = s.linear(dt_raw, self.dt_proj, Some(self.dt_bias))?;
        let delta = s.tape.softplus(dt)?;

        let a_log = s.param(self.a_log);
        let a = s.tape.exp(a_log)?;
        let a = s.tape.neg(a)?;
        let d = s.param(self.d_skip);
        let y = s.tape.selective_scan(x, delta, a, b, c, d)?;

        let gate = s.tape.silu(z)?;
        let gated = s.tape.mul(y, gate)?;
        s.linear(gated, self.out_proj, None)
    }

    pub fn adaptable(
        &self,
        cfg: &EncoderConfig,
        which: crate::peft::AdapterTarget,
    ) -> Option<AdaptableMatrix> {
        use crate::peft::AdapterTarget as T;
        let (di, r, ds) = (cfg.d_inner(), cfg.dt_rank(), cfg.d_state);
        match which {
            T::InProj => Some(AdaptableMatrix {
                weight: self.in_proj,
                slices: vec![(FeatureSlice::X, 0..di), (FeatureSlice::Z, di..2 * di)],
            }),
            T::XProj => Some(AdaptableMatrix {
                weight: self.x_proj,
                slices: vec![
                    (FeatureSlice::Dt, 0..r),
                    (FeatureSlice::B, r..r + ds),
                    (FeatureSlice::C, r + ds..r + 2 * ds),
                ],
            }),
            T::DtProj => Some(AdaptableMatrix::whole(self.dt_proj)),
            T::OutProj => Some(AdaptableMatrix::whole(self.out_proj)),
            _ => None,
        }
    }
}

/// Pre-norm bidirectional block: `u + (y_fwd + y_bwd)`, each direction with
/// its own parameters, the backward one run on the reversed sequence.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub fwd: MambaDirection,
    pub bwd: MambaDirection,
}

impl MambaBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &EncoderConfig,
        prefix: &str,
    ) -> Result<Self> {
        let norm_gain = store.add(&format!("{prefix}.norm.gain"), ones(cfg.d_model), true)?;
        let norm_bias = store.add(
            &format!("{prefix}.norm.bias"),
            Tensor::zeros(&[cfg.d_model]),
            true,
        )?;
        let fwd = MambaDirection::new(store, rng, cfg, &format!("{prefix}.fwd"))?;
        let bwd = MambaDirection::new(store, rng, cfg, &format!("{prefix}.bwd"))?;
        Ok(MambaBlock {
            norm_gain,
            norm_bias,
            fwd,
            bwd,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, cfg: &EncoderConfig, u: Var) -> Result<Var> {
        let g = s.param(self.norm_gain);
        let b = s.param(self.norm_bias);
        let n = s.tape.layer_norm(u, g, b, NORM_EPS)?;
        let y_fwd = self.fwd.forward(s, cfg, n)?;
        let reversed = s.tape.flip_rows(n)?;
        let y_bwd = self.bwd.forward(s, cfg, reversed)?;
        let y_bwd = s.tape.flip_rows(y_bwd)?;
        let y = s.tape.add(y_fwd, y_bwd)?;
        s.tape.add(u, y)
    }
}
