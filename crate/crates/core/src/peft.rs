//! Low-rank adapters over frozen projection matrices.
//!
//! A [`LoraAdapter`] wraps one weight `W[out × in]` and adds
//! `scale · up · down` to a contiguous window of its output rows. With the
//! window equal to the whole matrix this is ordinary LoRA; restricted to the
//! rows that produce one intermediate feature of a Mamba block (`X`, `Z`,
//! `dt`, `B` or `C`) it is partial LoRA.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{uniform, ParamId, ParamStore};
use crate::tape::{Session, Var};
use crate::tensor::Tensor;

/// Language-model projection matrices that may carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LmMatrix {
    #[cfg_attr(feature = "serde", serde(rename = "q"))]
    Query,
    #[cfg_attr(feature = "serde", serde(rename = "k"))]
    Key,
    #[cfg_attr(feature = "serde", serde(rename = "v"))]
    Value,
    #[cfg_attr(feature = "serde", serde(rename = "o"))]
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AdapterTarget {
    /// Patch-embedding projection of the vision encoder.
    Embedding,
    InProj,
    XProj,
    DtProj,
    OutProj,
    /// Self-attention projection in every language-model layer.
    Lm(LmMatrix),
}

impl AdapterTarget {
    /// Slices this target admits, in output-row order.
    pub fn admissible_slices(self) -> &'static [FeatureSlice] {
        match self {
            AdapterTarget::InProj => &[FeatureSlice::X, FeatureSlice::Z],
            AdapterTarget::XProj => &[FeatureSlice::Dt, FeatureSlice::B, FeatureSlice::C],
            _ => &[],
        }
    }
}

impl fmt::Display for AdapterTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AdapterTarget::Embedding => "embedding",
            AdapterTarget::InProj => "in_proj",
            AdapterTarget::XProj => "x_proj",
            AdapterTarget::DtProj => "dt_proj",
            AdapterTarget::OutProj => "out_proj",
            AdapterTarget::Lm(LmMatrix::Query) => "lm.q",
            AdapterTarget::Lm(LmMatrix::Key) => "lm.k",
            AdapterTarget::Lm(LmMatrix::Value) => "lm.v",
            AdapterTarget::Lm(LmMatrix::Output) => "lm.o",
        };
        f.write_str(s)
    }
}

/// Named intermediate feature produced by a window of output rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FeatureSlice {
    X,
    Z,
    #[cfg_attr(feature = "serde", serde(rename = "dt"))]
    Dt,
    B,
    C,
}

impl FeatureSlice {
    pub const ALL: [FeatureSlice; 5] = [
        FeatureSlice::X,
        FeatureSlice::Z,
        FeatureSlice::Dt,
        FeatureSlice::B,
        FeatureSlice::C,
    ];
}

impl fmt::Display for FeatureSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureSlice::X => "X",
            FeatureSlice::Z => "Z",
            FeatureSlice::Dt => "dt",
            FeatureSlice::B => "B",
            FeatureSlice::C => "C",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AdapterSpec {
    pub target: AdapterTarget,
    #[cfg_attr(feature = "serde", serde(default))]
    pub slice: Option<FeatureSlice>,
    pub rank: usize,
    /// Scale numerator; defaults to `rank` (scale 1).
    #[cfg_attr(feature = "serde", serde(default))]
    pub alpha: Option<f64>,
}

impl AdapterSpec {
    pub fn lora(target: AdapterTarget, rank: usize) -> Self {
        AdapterSpec {
            target,
            slice: None,
            rank,
            alpha: None,
        }
    }

    pub fn partial(target: AdapterTarget, slice: FeatureSlice, rank: usize) -> Self {
        AdapterSpec {
            target,
            slice: Some(slice),
            rank,
            alpha: None,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }

    /// Parameters one adapter of this spec adds to a `[rows × d_in]` window.
    pub fn param_count(&self, d_in: usize, slice_rows: usize) -> usize {
        self.rank * (d_in + slice_rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config(format!(
                "adapter on {} has rank 0",
                self.target
            )));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!(
                    "adapter alpha must be positive, got {a}"
                )));
            }
        }
        if let Some(slice) = self.slice {
            if !self.target.admissible_slices().contains(&slice) {
                return Err(Error::Config(format!(
                    "slice {slice} is not produced by {}",
                    self.target
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for AdapterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.slice {
            Some(s) => write!(f, "LoRA_p({s})@{}", self.target),
            None => write!(f, "LoRA({})", self.target),
        }
    }
}

/// A concrete weight matrix that specs resolve to, with its slice layout.
#[derive(Debug, Clone)]
pub struct AdaptableMatrix {
    pub weight: ParamId,
    pub slices: Vec<(FeatureSlice, Range<usize>)>,
}

impl AdaptableMatrix {
    pub fn whole(weight: ParamId) -> Self {
        AdaptableMatrix {
            weight,
            slices: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct AdapterHandle(usize);

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub spec: AdapterSpec,
    pub target: ParamId,
    pub rows: Range<usize>,
    /// `[rank × d_in]`
    pub down: ParamId,
    /// `[rows × rank]`, zero at creation.
    pub up: ParamId,
    pub scale: f64,
    merged: bool,
}

impl LoraAdapter {
    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// `scale · up · down`, shape `[rows × d_in]`.
    pub fn delta_weight(&self, store: &ParamStore) -> Vec<f64> {
        let down = store.value(self.down);
        let up = store.value(self.up);
        let (r, d_in) = (down.shape()[0], down.shape()[1]);
        let rows = up.shape()[0];
        let mut out = alloc::vec![0.0; rows * d_in];
        for i in 0..rows {
            for k in 0..r {
                let u = up.data()[i * r + k];
                for j in 0..d_in {
                    out[i * d_in + j] += u * down.data()[k * d_in + j];
                }
            }
        }
        for v in &mut out {
            *v *= self.scale;
        }
        out
    }
}

/// Every adapter attached to a model, indexed by the weight it wraps.
#[derive(Debug, Clone, Default)]
pub struct AdapterSet {
    adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (AdapterHandle, &LoraAdapter)> {
        self.adapters
            .iter()
            .enumerate()
            .map(|(i, a)| (AdapterHandle(i), a))
    }

    pub fn get(&self, h: AdapterHandle) -> &LoraAdapter {
        &self.adapters[h.0]
    }

    pub fn for_weight(&self, w: ParamId) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.iter().filter(move |a| a.target == w)
    }

    pub fn specs(&self) -> Vec<AdapterSpec> {
        let mut out: Vec<AdapterSpec> = Vec::new();
        for a in &self.adapters {
            if !out.contains(&a.spec) {
                out.push(a.spec.clone());
            }
        }
        out
    }

    /// Resolves `spec` against `matrices`, freezes each base weight and
    /// registers a fresh zero-initialised adapter on it.
    pub fn attach<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        spec: &AdapterSpec,
        matrices: &[AdaptableMatrix],
        rng: &mut R,
    ) -> Result<Vec<AdapterHandle>> {
        spec.validate()?;
        if self
            .adapters
            .iter()
            .any(|a| a.spec.target == spec.target && a.spec.slice == spec.slice)
        {
            return Err(Error::Config(format!("duplicate adapter {spec}")));
        }
        if matrices.is_empty() {
            return Err(Error::Config(format!(
                "no matrix matches adapter target {}",
                spec.target
            )));
        }
        let mut planned = Vec::with_capacity(matrices.len());
        for m in matrices {
            let (out, d_in) = store.value(m.weight).dims2()?;
            let rows = match spec.slice {
                None => 0..out,
                Some(s) => m
                    .slices
                    .iter()
                    .find(|(fs, _)| *fs == s)
                    .map(|(_, r)| r.clone())
                    .ok_or_else(|| Error::Config(format!("matrix has no {s} slice")))?,
            };
            let limit = d_in.min(rows.len());
            if spec.rank > limit {
                return Err(Error::Config(format!(
                    "rank {} exceeds min(d_in, slice_rows) = {limit} for {spec}",
                    spec.rank
                )));
            }
            planned.push((m.weight, d_in, rows));
        }
        let mut handles = Vec::with_capacity(planned.len());
        for (weight, d_in, rows) in planned {
            let base: String = store.get(weight).name.clone();
            let tag = match spec.slice {
                Some(s) => format!("{s}"),
                None => String::from("full"),
            };
            let down = store.add(
                &format!("{base}.lora.{tag}.down"),
                uniform(rng, &[spec.rank, d_in], 1.0 / libm::sqrt(d_in as f64)),
                true,
            )?;
            let up = store.add(
                &format!("{base}.lora.{tag}.up"),
                Tensor::zeros(&[rows.len(), spec.rank]),
                true,
            )?;
            store.set_requires_grad(weight, false);
            handles.push(AdapterHandle(self.adapters.len()));
            self.adapters.push(LoraAdapter {
                spec: spec.clone(),
                target: weight,
                rows,
                down,
                up,
                scale: spec.scale(),
                merged: false,
            });
        }
        Ok(handles)
    }

    /// Folds the adapter update into its base weight rows.
    pub fn merge(&mut self, store: &mut ParamStore, h: AdapterHandle) -> Result<()> {
        let a = &self.adapters[h.0];
        if a.merged {
            return Err(Error::State(format!("adapter {} already merged", a.spec)));
        }
        apply_delta(store, a, 1.0)?;
        self.adapters[h.0].merged = true;
        Ok(())
    }

    pub fn unmerge(&mut self, store: &mut ParamStore, h: AdapterHandle) -> Result<()> {
        let a = &self.adapters[h.0];
        if !a.merged {
            return Err(Error::State(format!("adapter {} is not merged", a.spec)));
        }
        apply_delta(store, a, -1.0)?;
        self.adapters[h.0].merged = false;
        Ok(())
    }
}

fn apply_delta(store: &mut ParamStore, a: &LoraAdapter, sign: f64) -> Result<()> {
    let delta = a.delta_weight(store);
    let w = store.value_mut(a.target);
    let (_, d_in) = w.dims2()?;
    let data = w.data_mut();
    for (k, row) in a.rows.clone().enumerate() {
        for j in 0..d_in {
            data[row * d_in + j] += sign * delta[k * d_in + j];
        }
    }
    Ok(())
}

impl Session<'_> {
    /// `x · Wᵀ (+ b)` plus the update of every unmerged adapter on `W`,
    /// scattered into that adapter's output-row window.
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>) -> Result<Var> {
        let w = self.param(weight);
        let mut y = self.tape.matmul_t(x, w)?;
        if let Some(b) = bias {
            let bv = self.param(b);
            y = self.tape.add_bias(y, bv)?;
        }
        let adapters = self.adapters();
        for a in adapters.for_weight(weight).filter(|a| !a.merged) {
            let down = self.param(a.down);
            let up = self.param(a.up);
            let h = self.tape.matmul_t(x, down)?;
            let d = self.tape.matmul_t(h, up)?;
            let d = if a.scale == 1.0 {
                d
            } else {
                self.tape.scale(d, a.scale)?
            };
            y = self.tape.add_cols(y, d, a.rows.start)?;
        }
        Ok(y)
    }
}

/// The eleven single-component tuning settings compared in the adapter
/// ablation, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TuningSetting {
    LoraLm,
    LoraEmbedding,
    LoraXProj,
    LoraDtProj,
    LoraInProj,
    LoraOutProj,
    PartialZ,
    PartialDt,
    PartialB,
    PartialC,
    PartialX,
}

impl TuningSetting {
    pub const ALL: [TuningSetting; 11] = [
        TuningSetting::LoraLm,
        TuningSetting::LoraEmbedding,
        TuningSetting::LoraXProj,
        TuningSetting::LoraDtProj,
        TuningSetting::LoraInProj,
        TuningSetting::LoraOutProj,
        TuningSetting::PartialZ,
        TuningSetting::PartialDt,
        TuningSetting::PartialB,
        TuningSetting::PartialC,
        TuningSetting::PartialX,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TuningSetting::LoraLm => "LoRA(Llama2)",
            TuningSetting::LoraEmbedding => "LoRA(embedding)",
            TuningSetting::LoraXProj => "LoRA(x_proj)",
            TuningSetting::LoraDtProj => "LoRA(dt_proj)",
            TuningSetting::LoraInProj => "LoRA(in_proj)",
            TuningSetting::LoraOutProj => "LoRA(out_proj)",
            TuningSetting::PartialZ => "LoRA_p(Z)",
            TuningSetting::PartialDt => "LoRA_p(dt)",
            TuningSetting::PartialB => "LoRA_p(B)",
            TuningSetting::PartialC => "LoRA_p(C)",
            TuningSetting::PartialX => "LoRA_p(X)",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.label() == label)
    }

    pub fn specs(self, rank: usize) -> Vec<AdapterSpec> {
        use AdapterTarget::*;
        use FeatureSlice as S;
        match self {
            TuningSetting::LoraLm => [
                LmMatrix::Query,
                LmMatrix::Key,
                LmMatrix::Value,
                LmMatrix::Output,
            ]
            .into_iter()
            .map(|m| AdapterSpec::lora(Lm(m), rank))
            .collect(),
            TuningSetting::LoraEmbedding => alloc::vec![AdapterSpec::lora(Embedding, rank)],
            TuningSetting::LoraXProj => alloc::vec![AdapterSpec::lora(XProj, rank)],
            TuningSetting::LoraDtProj => alloc::vec![AdapterSpec::lora(DtProj, rank)],
            TuningSetting::LoraInProj => alloc::vec![AdapterSpec::lora(InProj, rank)],
            TuningSetting::LoraOutProj => alloc::vec![AdapterSpec::lora(OutProj, rank)],
            TuningSetting::PartialZ => alloc::vec![AdapterSpec::partial(InProj, S::Z, rank)],
            TuningSetting::PartialDt => alloc::vec![AdapterSpec::partial(XProj, S::Dt, rank)],
            TuningSetting::PartialB => alloc::vec![AdapterSpec::partial(XProj, S::B, rank)],
            TuningSetting::PartialC => alloc::vec![AdapterSpec::partial(XProj, S::C, rank)],
            TuningSetting::PartialX => alloc::vec![AdapterSpec::partial(InProj, S::X, rank)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::linear_weight;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(out: usize, d_in: usize) -> (ParamStore, ParamId, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = store
            .add("w", linear_weight(&mut rng, out, d_in), true)
            .unwrap();
        (store, w, rng)
    }

    fn in_proj_layout(w: ParamId, d_inner: usize) -> AdaptableMatrix {
        AdaptableMatrix {
            weight: w,
            slices: alloc::vec![
                (FeatureSlice::X, 0..d_inner),
                (FeatureSlice::Z, d_inner..2 * d_inner)
            ],
        }
    }

    fn forward(store: &ParamStore, set: &AdapterSet, w: ParamId, x: &Tensor) -> Tensor {
        let mut s = Session::new(store, set);
        let xv = s.tape.constant(x.clone());
        let y = s.linear(xv, w, None).unwrap();
        s.tape.value(y).clone()
    }

    #[test]
    fn invalid_slice_and_rank_are_config_errors() {
        let (mut store, w, mut rng) = setup(8, 4);
        let mut set = AdapterSet::default();
        let m = [in_proj_layout(w, 4)];
        let bad_slice = AdapterSpec::partial(AdapterTarget::InProj, FeatureSlice::B, 2);
        assert!(matches!(
            set.attach(&mut store, &bad_slice, &m, &mut rng),
            Err(Error::Config(_))
        ));
        let bad_rank = AdapterSpec::partial(AdapterTarget::InProj, FeatureSlice::X, 5);
        assert!(matches!(
            set.attach(&mut store, &bad_rank, &m, &mut rng),
            Err(Error::Config(_))
        ));
        let ok = AdapterSpec::partial(AdapterTarget::InProj, FeatureSlice::X, 2);
        set.attach(&mut store, &ok, &m, &mut rng).unwrap();
        assert!(matches!(
            set.attach(&mut store, &ok, &m, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(!store.get(w).requires_grad);
    }

    #[test]
    fn zero_init_is_a_bitwise_no_op_and_slices_are_isolated() {
        let (mut store, w, mut rng) = setup(8, 4);
        let x = uniform(&mut rng, &[3, 4], 1.0);
        let base = forward(&store, &AdapterSet::default(), w, &x);
        let mut set = AdapterSet::default();
        let spec = AdapterSpec::partial(AdapterTarget::InProj, FeatureSlice::X, 2);
        let h = set
            .attach(&mut store, &spec, &[in_proj_layout(w, 4)], &mut rng)
            .unwrap();
        let adapted = forward(&store, &set, w, &x);
        assert_eq!(base, adapted);

        // make the adapter non-trivial: only X columns may move
        let up = set.get(h[0]).up;
        *store.value_mut(up) = uniform(&mut rng, &[4, 2], 1.0);
        let moved = forward(&store, &set, w, &x);
        for i in 0..3 {
            for j in 0..8 {
                let same = moved.at2(i, j).to_bits() == base.at2(i, j).to_bits();
                assert_eq!(same, j >= 4, "row {i} col {j}");
            }
        }
    }

    #[test]
    fn merge_unmerge_round_trip() {
        let (mut store, w, mut rng) = setup(6, 5);
        let original = store.value(w).clone();
        let mut set = AdapterSet::default();
        let spec = AdapterSpec::lora(AdapterTarget::OutProj, 3);
        let h = set
            .attach(&mut store, &spec, &[AdaptableMatrix::whole(w)], &mut rng)
            .unwrap()[0];
        set.merge(&mut store, h).unwrap();
        assert_eq!(store.value(w), &original, "up = 0 leaves W unchanged");
        set.unmerge(&mut store, h).unwrap();

        let up = set.get(h).up;
        *store.value_mut(up) = uniform(&mut rng, &[6, 3], 1.0);
        let inputs: Vec<Tensor> = (0..20).map(|_| uniform(&mut rng, &[2, 5], 1.0)).collect();
        let adapted: Vec<Tensor> = inputs.iter().map(|x| forward(&store, &set, w, x)).collect();
        set.merge(&mut store, h).unwrap();
        assert!(matches!(set.merge(&mut store, h), Err(Error::State(_))));
        for (x, want) in inputs.iter().zip(&adapted) {
            let got = forward(&store, &set, w, x);
            assert!(got.max_abs_diff(want) < 1e-12);
        }
        set.unmerge(&mut store, h).unwrap();
        assert!(store.value(w).max_abs_diff(&original) < 1e-12);
        assert!(matches!(set.unmerge(&mut store, h), Err(Error::State(_))));
    }

    #[test]
    fn param_count_formula() {
        let x = AdapterSpec::partial(AdapterTarget::InProj, FeatureSlice::X, 32);
        assert_eq!(x.param_count(1024, 2048), 98_304);
        let z = AdapterSpec::partial(AdapterTarget::InProj, FeatureSlice::Z, 32);
        assert_eq!(z.param_count(1024, 2048), x.param_count(1024, 2048));
        let b = AdapterSpec::partial(AdapterTarget::XProj, FeatureSlice::B, 4);
        assert_eq!(b.param_count(32, 16), 192);
    }

    #[test]
    fn taxonomy_has_eleven_settings() {
        assert_eq!(TuningSetting::ALL.len(), 11);
        for s in TuningSetting::ALL {
            assert_eq!(TuningSetting::from_label(s.label()), Some(s));
            for spec in s.specs(2) {
                spec.validate().unwrap();
            }
        }
    }
}
