//! The assembled report generator: vision encoder, bridge, language model
//! and the adapters attached to them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::HasParams;
use crate::lm::{LanguageModel, LmConfig, VisualBridge};
use crate::param::{ParamId, ParamStore};
use crate::peft::{
    AdaptableMatrix, AdapterSet, AdapterSpec, AdapterTarget, FeatureSlice, TuningSetting,
};
use crate::ssm::{EncoderConfig, VisionEncoder, VisualFeatures};
use crate::tape::{Session, Var};
use crate::tensor::Tensor;

/// Adapter rank used by the desk presets.
pub const DESK_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub adapters: Vec<AdapterSpec>,
    /// Train every encoder weight that no adapter wraps.
    #[cfg_attr(feature = "serde", serde(default))]
    pub encoder_full_finetune: bool,
    /// Train every language-model weight that no adapter wraps.
    #[cfg_attr(feature = "serde", serde(default))]
    pub lm_full_finetune: bool,
    /// Keep every warm-up scalar fixed at its initial value.
    #[cfg_attr(feature = "serde", serde(default))]
    pub freeze_warmup: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub init_seed: u64,
}

/// Encoder column of the component grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsmMode {
    FullFinetune,
    PartialX,
}

/// Language-model column of the component grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmMode {
    /// Frozen model, visual tokens prepended.
    Plain,
    /// LoRA on every attention projection, visual tokens prepended.
    Lora,
    /// Hybrid decoder layers, visual tokens only through cross-attention.
    Hybrid,
}

impl fmt::Display for SsmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SsmMode::FullFinetune => "FT",
            SsmMode::PartialX => "LoRA_P(X)",
        })
    }
}

impl fmt::Display for LmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LmMode::Plain => "L2",
            LmMode::Lora => "L2+LoRA",
            LmMode::Hybrid => "L2+HDL",
        })
    }
}

/// One row of the component grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentRow {
    pub index: usize,
    pub ssm: SsmMode,
    pub lm: LmMode,
}

impl ComponentRow {
    pub const ALL: [ComponentRow; 6] = [
        ComponentRow {
            index: 1,
            ssm: SsmMode::FullFinetune,
            lm: LmMode::Plain,
        },
        ComponentRow {
            index: 2,
            ssm: SsmMode::FullFinetune,
            lm: LmMode::Lora,
        },
        ComponentRow {
            index: 3,
            ssm: SsmMode::FullFinetune,
            lm: LmMode::Hybrid,
        },
        ComponentRow {
            index: 4,
            ssm: SsmMode::PartialX,
            lm: LmMode::Plain,
        },
        ComponentRow {
            index: 5,
            ssm: SsmMode::PartialX,
            lm: LmMode::Lora,
        },
        ComponentRow {
            index: 6,
            ssm: SsmMode::PartialX,
            lm: LmMode::Hybrid,
        },
    ];

    pub fn label(&self) -> String {
        format!("#{:02}", self.index)
    }
}

fn lm_specs(rank: usize) -> Vec<AdapterSpec> {
    TuningSetting::LoraLm.specs(rank)
}

impl ModelConfig {
    /// The full method at desk scale: partial LoRA on X in every encoder
    /// block plus LoRA on the patch embedding, frozen language model with
    /// hybrid decoder layers.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            lm: LmConfig {
                vocab_size,
                ..LmConfig::default()
            },
            adapters: Self::encoder_composite(DESK_RANK),
            encoder_full_finetune: false,
            lm_full_finetune: false,
            freeze_warmup: false,
            init_seed: 0,
        }
    }

    /// Encoder adapters of the full method.
    pub fn encoder_composite(rank: usize) -> Vec<AdapterSpec> {
        vec![
            AdapterSpec::partial(AdapterTarget::InProj, FeatureSlice::X, rank),
            AdapterSpec::lora(AdapterTarget::Embedding, rank),
        ]
    }

    /// Same model with every `g_s` pinned at zero (image-blind control).
    pub fn control(mut self) -> Self {
        self.freeze_warmup = true;
        self
    }

    pub fn component(row: ComponentRow, vocab_size: usize) -> Self {
        Self::desk(vocab_size).component_cell(row)
    }

    /// Component-grid cell sharing this configuration's dimensions and seed.
    pub fn component_cell(&self, row: ComponentRow) -> Self {
        let mut cfg = self.clone();
        cfg.adapters.clear();
        cfg.encoder_full_finetune = false;
        cfg.lm_full_finetune = false;
        cfg.freeze_warmup = false;
        cfg.lm.visual_prefix = false;
        match row.ssm {
            SsmMode::FullFinetune => cfg.encoder_full_finetune = true,
            SsmMode::PartialX => cfg.adapters.extend(Self::encoder_composite(DESK_RANK)),
        }
        match row.lm {
            LmMode::Plain | LmMode::Lora => {
                cfg.lm.hybrid_indices.clear();
                cfg.lm.visual_prefix = true;
                if row.lm == LmMode::Lora {
                    cfg.adapters.extend(lm_specs(DESK_RANK));
                }
            }
            LmMode::Hybrid => {}
        }
        cfg
    }

    /// One adapter setting on an otherwise frozen model with visual tokens
    /// prepended to a plain language model.
    pub fn tuning(setting: TuningSetting, vocab_size: usize) -> Self {
        Self::desk(vocab_size).tuning_cell(setting)
    }

    /// Tuning-grid cell sharing this configuration's dimensions and seed.
    pub fn tuning_cell(&self, setting: TuningSetting) -> Self {
        let mut cfg = self.clone();
        cfg.encoder_full_finetune = false;
        cfg.lm_full_finetune = false;
        cfg.freeze_warmup = false;
        cfg.lm.hybrid_indices.clear();
        cfg.lm.visual_prefix = true;
        cfg.adapters = setting.specs(DESK_RANK);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()?;
        for spec in &self.adapters {
            spec.validate()?;
        }
        if self.lm.visual_prefix && self.encoder.n_tokens() + 3 > self.lm.max_seq_len {
            return Err(Error::Config(format!(
                "max_seq_len {} cannot hold {} visual tokens and a prompt",
                self.lm.max_seq_len,
                self.encoder.n_tokens()
            )));
        }
        Ok(())
    }

    /// `(d_in, slice_rows, matrices)` an adapter spec resolves to.
    pub fn adapter_geometry(&self, spec: &AdapterSpec) -> (usize, usize, usize) {
        let e = &self.encoder;
        let (dm, di, r, ds) = (e.d_model, e.d_inner(), e.dt_rank(), e.d_state);
        let per_encoder = 2 * e.n_blocks;
        let (d_in, rows, n) = match spec.target {
            AdapterTarget::Embedding => (e.patch().patch_dim(), dm, 1),
            AdapterTarget::InProj => (dm, 2 * di, per_encoder),
            AdapterTarget::XProj => (di, r + 2 * ds, per_encoder),
            AdapterTarget::DtProj => (r, di, per_encoder),
            AdapterTarget::OutProj => (di, dm, per_encoder),
            AdapterTarget::Lm(_) => (self.lm.d, self.lm.d, self.lm.n_layers),
        };
        let slice_rows = match spec.slice {
            None => rows,
            Some(FeatureSlice::X) | Some(FeatureSlice::Z) => di,
            Some(FeatureSlice::Dt) => r,
            Some(FeatureSlice::B) | Some(FeatureSlice::C) => ds,
        };
        (d_in, slice_rows, n)
    }

    /// Closed-form trainable parameter count, without building the model.
    pub fn predicted_trainable(&self) -> usize {
        let adapters: usize = self
            .adapters
            .iter()
            .map(|s| {
                let (d_in, rows, n) = self.adapter_geometry(s);
                n * s.param_count(d_in, rows)
            })
            .sum();
        let wrapped = |encoder: bool| -> usize {
            let mut seen: Vec<AdapterTarget> = Vec::new();
            let mut total = 0;
            for s in &self.adapters {
                let is_enc = !matches!(s.target, AdapterTarget::Lm(_));
                if is_enc != encoder || seen.contains(&s.target) {
                    continue;
                }
                seen.push(s.target);
                let full = AdapterSpec {
                    slice: None,
                    ..s.clone()
                };
                let (d_in, rows, n) = self.adapter_geometry(&full);
                total += n * d_in * rows;
            }
            total
        };
        let encoder = if self.encoder_full_finetune {
            self.encoder.total_params() - wrapped(true)
        } else {
            0
        };
        let lm = if self.lm_full_finetune {
            self.lm.base_params() - wrapped(false)
        } else {
            0
        };
        let n_hybrid = self.lm.hybrid_indices.len();
        let warmup = if self.freeze_warmup { n_hybrid } else { 0 };
        let cross = n_hybrid * self.lm.cross_params() - warmup;
        adapters + encoder + lm + cross + self.lm.bridge_params(self.encoder.d_model)
    }
}

/// Trainable and total counts, overall and per component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    /// `(component, trainable, total)`
    pub breakdown: Vec<(String, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct EmrrgModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub adapters: AdapterSet,
    pub encoder: VisionEncoder,
    pub bridge: VisualBridge,
    pub lm: LanguageModel,
}

impl HasParams for EmrrgModel {
    fn param_store(&self) -> &ParamStore {
        &self.params
    }
    fn param_store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl EmrrgModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = ParamStore::new();
        let encoder = VisionEncoder::new(&mut params, &mut rng, &cfg.encoder)?;
        let bridge = VisualBridge::new(&mut params, &mut rng, cfg.encoder.d_model, cfg.lm.d)?;
        let lm = LanguageModel::new(&mut params, &mut rng, &cfg.lm)?;
        let mut model = EmrrgModel {
            cfg: cfg.clone(),
            params,
            adapters: AdapterSet::default(),
            encoder,
            bridge,
            lm,
        };
        model.apply_freezing();
        for spec in &cfg.adapters {
            let matrices = model.adaptable(spec.target)?;
            model
                .adapters
                .attach(&mut model.params, spec, &matrices, &mut rng)?;
        }
        Ok(model)
    }

    fn adaptable(&self, target: AdapterTarget) -> Result<Vec<AdaptableMatrix>> {
        match target {
            AdapterTarget::Lm(m) => Ok(self.lm.adaptable(m)),
            t => self.encoder.adaptable(t),
        }
    }

    /// Sets `requires_grad` on every parameter from the configuration.
    pub fn apply_freezing(&mut self) {
        let cfg = &self.cfg;
        for id in self.encoder.param_ids() {
            self.params.set_requires_grad(id, cfg.encoder_full_finetune);
        }
        for id in self.lm.base_param_ids() {
            self.params.set_requires_grad(id, cfg.lm_full_finetune);
        }
        for id in self.lm.cross_param_ids() {
            self.params.set_requires_grad(id, true);
        }
        for id in self.lm.warmup_ids() {
            self.params.set_requires_grad(id, !cfg.freeze_warmup);
        }
        for id in [self.bridge.weight, self.bridge.bias] {
            self.params.set_requires_grad(id, true);
        }
        let wrapped: Vec<ParamId> = self.adapters.iter().map(|(_, a)| a.target).collect();
        for (_, a) in self.adapters.iter() {
            self.params.set_requires_grad(a.down, true);
            self.params.set_requires_grad(a.up, true);
        }
        for id in wrapped {
            self.params.set_requires_grad(id, false);
        }
    }

    /// Ids of every adapter parameter.
    pub fn adapter_param_ids(&self) -> Vec<ParamId> {
        self.adapters
            .iter()
            .flat_map(|(_, a)| [a.down, a.up])
            .collect()
    }

    /// Bridged visual tokens `[N × d]` for `image`, recorded on the session.
    pub fn visual_tokens(&self, s: &mut Session<'_>, image: Var) -> Result<Var> {
        let feats = self.encoder.forward(s, image)?;
        self.bridge.forward(s, feats)
    }

    /// Teacher-forced logits over `[BOS] prompt [SEP] report`.
    pub fn forward_logits(
        &self,
        s: &mut Session<'_>,
        image: &Tensor,
        prompt: &[usize],
        report: &[usize],
    ) -> Result<Var> {
        let img = s.tape.constant(image.clone());
        let vis = self.visual_tokens(s, img)?;
        self.lm.lm_forward(s, prompt, report, Some(vis))
    }

    pub fn encode(&self, image: &Tensor) -> Result<VisualFeatures> {
        self.encoder.encode(&self.params, &self.adapters, image)
    }

    /// Greedy report ids for one image.
    pub fn generate(&self, image: &Tensor, prompt: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let mut s = Session::new(&self.params, &self.adapters);
        let img = s.tape.constant(image.clone());
        let vis = self.visual_tokens(&mut s, img)?;
        let bridged = s.tape.value(vis).clone();
        drop(s);
        self.lm.greedy_decode(
            &self.params,
            &self.adapters,
            prompt,
            Some(&bridged),
            max_len,
        )
    }

    /// Exact counts from the registered parameters and their flags.
    pub fn count_trainable(&self) -> ParamCount {
        let mut groups: Vec<(String, Vec<ParamId>)> = vec![
            ("encoder".into(), self.encoder.param_ids()),
            ("bridge".into(), vec![self.bridge.weight, self.bridge.bias]),
            ("lm".into(), self.lm.base_param_ids()),
            ("hybrid".into(), self.lm.cross_param_ids()),
            ("adapters".into(), self.adapter_param_ids()),
        ];
        groups.retain(|(_, ids)| !ids.is_empty());
        let mut breakdown = Vec::new();
        for (name, ids) in groups {
            let mut trainable = 0;
            let mut total = 0;
            for id in ids {
                let p = self.params.get(id);
                total += p.value.numel();
                if p.requires_grad {
                    trainable += p.value.numel();
                }
            }
            breakdown.push((name, trainable, total));
        }
        ParamCount {
            total: self.params.total_numel(),
            trainable: self.params.trainable_numel(),
            breakdown,
        }
    }

    /// Current warm-up scalars, in depth order.
    pub fn warmup_values(&self) -> Vec<f64> {
        self.lm
            .warmup_ids()
            .into_iter()
            .map(|id| self.params.value(id).data()[0])
            .collect()
    }
}
