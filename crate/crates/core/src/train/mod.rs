//! Teacher-forced NLL training of the full model, with an optional
//! text-only pretraining stage for the language model.

mod optim;

pub use optim::{clip_grad_norm, grad_norm, AdamW};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hash::Fnv64;
use crate::lm::LanguageModel;
use crate::metrics;
use crate::model::EmrrgModel;
use crate::param::ParamStore;
use crate::peft::AdapterSet;
use crate::tape::{Session, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, EOS};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Fraction of an epoch between validation passes.
    pub validate_every: f64,
    pub max_report_len: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Text-only language-model steps run before fine-tuning.
    pub pretrain_steps: usize,
    pub pretrain_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            grad_clip_norm: 1.0,
            seed: 0,
            validate_every: 1.0,
            max_report_len: 60,
            max_steps: None,
            pretrain_steps: 0,
            pretrain_learning_rate: 3e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.validate_every > 0.0 && self.validate_every <= 1.0) {
            return Err(Error::Config(format!(
                "validate_every must lie in (0, 1], got {}",
                self.validate_every
            )));
        }
        if !(self.learning_rate >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.grad_clip_norm > 0.0)
        {
            return Err(Error::Config(
                "learning_rate, weight_decay and grad_clip_norm must be non-negative".into(),
            ));
        }
        if self.max_report_len == 0 {
            return Err(Error::Config("max_report_len must be positive".into()));
        }
        Ok(())
    }
}

/// One image and its encoded report.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: Tensor,
    pub report: String,
    /// Report token ids without BOS/SEP/EOS.
    pub report_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossRecord {
    pub step: usize,
    pub nll: f64,
    pub tokens_seen: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ValidationRecord {
    pub step: usize,
    pub epoch: usize,
    pub nll: f64,
    pub bleu4: f64,
}

pub enum FitEvent<'a> {
    Step(&'a LossRecord),
    Validation(&'a ValidationRecord),
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub losses: Vec<LossRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Index into `validations` of the restored checkpoint.
    pub best: Option<usize>,
    /// FNV-64 of the example order consumed over the whole run.
    pub data_order_hash: u64,
    pub steps: usize,
}

/// Teacher-forcing layout for `[BOS] prompt [SEP] report [EOS]`: row `i` of
/// the logits predicts `targets[i]`; only report and EOS rows count.
pub fn targets_and_mask(prompt_len: usize, report: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let t = prompt_len + 2 + report.len();
    let mut targets = Vec::with_capacity(t);
    let mut mask = Vec::with_capacity(t);
    for i in 0..t {
        let next = i + 1;
        let (tok, on) = if next <= prompt_len {
            (0, false)
        } else if next == prompt_len + 1 {
            (crate::vocab::SEP, false)
        } else if next - (prompt_len + 2) < report.len() {
            (report[next - (prompt_len + 2)], true)
        } else {
            (EOS, true)
        };
        targets.push(tok);
        mask.push(on);
    }
    (targets, mask)
}

/// Mean NLL over masked rows.
pub fn nll_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Contract("nll_loss with an empty mask".into()));
    }
    let s = tape.nll_sum(logits, targets, mask)?;
    tape.scale(s, 1.0 / n as f64)
}

fn truncated(report: &[usize], max_len: usize) -> &[usize] {
    &report[..report.len().min(max_len)]
}

/// Token-averaged loss of a batch on one tape; returns `(loss, tokens)`.
fn batch_loss(
    model: &EmrrgModel,
    s: &mut Session<'_>,
    batch: &[&Example],
    prompt: &[usize],
    max_report_len: usize,
    with_image: bool,
) -> Result<(Var, usize)> {
    let mut total: Option<Var> = None;
    let mut tokens = 0;
    for ex in batch {
        let report = truncated(&ex.report_ids, max_report_len);
        let logits = if with_image {
            model.forward_logits(s, &ex.image, prompt, report)?
        } else {
            model.lm.lm_forward(s, prompt, report, None)?
        };
        let (targets, mask) = targets_and_mask(prompt.len(), report);
        tokens += report.len() + 1;
        let l = s.tape.nll_sum(logits, &targets, &mask)?;
        total = Some(match total {
            Some(t) => s.tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let loss = s.tape.scale(total, 1.0 / tokens as f64)?;
    Ok((loss, tokens))
}

/// Forward, backward, clip, update, zero grads.
pub fn train_step(
    model: &mut EmrrgModel,
    opt: &mut AdamW,
    batch: &[&Example],
    prompt: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    let (tape, loss, tokens) = {
        let mut s = Session::new(&model.params, &model.adapters);
        let (loss, tokens) = batch_loss(model, &mut s, batch, prompt, cfg.max_report_len, true)?;
        (s.into_tape(), loss, tokens)
    };
    let nll = tape.value(loss).data()[0];
    model.params.zero_grad();
    tape.backward_into(loss, &mut model.params)?;
    drop(tape);
    clip_grad_norm(&mut model.params, cfg.grad_clip_norm);
    opt.step(&mut model.params);
    model.params.zero_grad();
    Ok((nll, tokens))
}

/// Mean per-token NLL over `examples` without gradients.
pub fn evaluate_nll(
    model: &EmrrgModel,
    examples: &[Example],
    prompt: &[usize],
    max_report_len: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let mut s = Session::new(&model.params, &model.adapters);
        let report = truncated(&ex.report_ids, max_report_len);
        let logits = model.forward_logits(&mut s, &ex.image, prompt, report)?;
        let (targets, mask) = targets_and_mask(prompt.len(), report);
        let l = s.tape.nll_sum(logits, &targets, &mask)?;
        sum += s.tape.value(l).data()[0];
        tokens += report.len() + 1;
    }
    if tokens == 0 {
        return Err(Error::Contract("evaluate_nll on an empty set".into()));
    }
    Ok(sum / tokens as f64)
}

/// Greedy decode of every example, as report text.
pub fn generate_reports(
    model: &EmrrgModel,
    examples: &[Example],
    prompt: &[usize],
    vocab: &Vocabulary,
    max_report_len: usize,
) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|ex| {
            let ids = model.generate(&ex.image, prompt, max_report_len + 1)?;
            vocab.decode(&ids)
        })
        .collect()
}

fn validation_points(batches: usize, validate_every: f64) -> Vec<usize> {
    let k = (libm::round(1.0 / validate_every) as usize).clamp(1, batches.max(1));
    let mut pts: Vec<usize> = (1..=k).map(|j| (j * batches).div_ceil(k)).collect();
    pts.dedup();
    pts
}

/// Trains for `cfg.epochs` (or `cfg.max_steps`), validating on `val` every
/// `validate_every` of an epoch, and leaves the best-BLEU-4 parameters in
/// `model` (ties go to lower NLL). Without a validation set the final
/// parameters are kept.
pub fn fit(
    model: &mut EmrrgModel,
    train: &[Example],
    val: &[Example],
    prompt: &[usize],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(FitEvent<'_>),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("fit needs a non-empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.betas, cfg.weight_decay);
    let mut order_hash = Fnv64::new();
    let n_batches = train.len().div_ceil(cfg.batch_size);
    let points = validation_points(n_batches, cfg.validate_every);
    let refs: Vec<&str> = val.iter().map(|e| e.report.as_str()).collect();

    let mut result = FitResult {
        losses: Vec::new(),
        validations: Vec::new(),
        best: None,
        data_order_hash: 0,
        steps: 0,
    };
    let mut best: Option<(f64, f64, Vec<Tensor>)> = None;
    let mut tokens_seen = 0;
    let mut last_validated = usize::MAX;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    let mut validate = |model: &EmrrgModel,
                        result: &mut FitResult,
                        epoch: usize,
                        observer: &mut dyn FnMut(FitEvent<'_>)|
     -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let nll = evaluate_nll(model, val, prompt, cfg.max_report_len)?;
        let preds = generate_reports(model, val, prompt, vocab, cfg.max_report_len)?;
        let pred_refs: Vec<&str> = preds.iter().map(String::as_str).collect();
        let bleu4 = metrics::bleu_text(&pred_refs, &refs, 4)?;
        let rec = ValidationRecord {
            step: result.steps,
            epoch,
            nll,
            bleu4,
        };
        observer(FitEvent::Validation(&rec));
        let better = match &best {
            None => true,
            Some((b, n, _)) => bleu4 > *b || (bleu4 == *b && nll < *n),
        };
        if better {
            best = Some((bleu4, nll, model.params.snapshot()));
            result.best = Some(result.validations.len());
        }
        result.validations.push(rec);
        Ok(())
    };

    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if result.steps >= max_steps {
                break 'outer;
            }
            for &i in chunk {
                order_hash.write(train[i].id.as_bytes());
                order_hash.write(&[0xff]);
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (nll, tokens) = train_step(model, &mut opt, &batch, prompt, cfg)?;
            result.steps += 1;
            tokens_seen += tokens;
            let rec = LossRecord {
                step: result.steps,
                nll,
                tokens_seen,
                lr: cfg.learning_rate,
            };
            observer(FitEvent::Step(&rec));
            result.losses.push(rec);
            if points.contains(&(b + 1)) {
                validate(model, &mut result, epoch, observer)?;
                last_validated = result.steps;
            }
        }
    }
    if last_validated != result.steps {
        let epoch = (result.steps.saturating_sub(1)) / n_batches;
        validate(model, &mut result, epoch, observer)?;
    }
    if let Some((_, _, snap)) = best {
        model.params.restore(&snap)?;
    }
    result.data_order_hash = order_hash.finish();
    Ok(result)
}

/// Text-only training of the language-model base weights, as a stand-in for
/// loading a pretrained decoder. Every other parameter is held fixed and the
/// original trainability flags are restored afterwards.
pub fn pretrain_language_model(
    model: &mut EmrrgModel,
    reports: &[Vec<usize>],
    prompt: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    if cfg.pretrain_steps == 0 {
        return Ok(Vec::new());
    }
    if reports.is_empty() {
        return Err(Error::Contract(
            "pretraining needs at least one report".into(),
        ));
    }
    let flags: Vec<bool> = model.params.iter().map(|(_, p)| p.requires_grad).collect();
    model.params.set_all_requires_grad(false);
    for id in model.lm.base_param_ids() {
        model.params.set_requires_grad(id, true);
    }
    let lm = model.lm.clone();
    let out = pretrain_inner(&mut model.params, &lm, reports, prompt, cfg);
    let ids: Vec<_> = model.params.ids().collect();
    for (id, f) in ids.into_iter().zip(flags) {
        model.params.set_requires_grad(id, f);
    }
    model.params.zero_grad();
    out
}

fn pretrain_inner(
    params: &mut ParamStore,
    lm: &LanguageModel,
    reports: &[Vec<usize>],
    prompt: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4554_5241_494e);
    let mut opt = AdamW::new(cfg.pretrain_learning_rate, cfg.betas, cfg.weight_decay);
    let empty = AdapterSet::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut records = Vec::with_capacity(cfg.pretrain_steps);
    let mut tokens_seen = 0;
    for step in 1..=cfg.pretrain_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(reports.len()) {
            if cursor == order.len() {
                order = (0..reports.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (tape, loss, tokens) = {
            let mut s = Session::new(params, &empty);
            let mut total: Option<Var> = None;
            let mut tokens = 0;
            for &i in &batch {
                let report = truncated(&reports[i], cfg.max_report_len);
                let logits = lm.lm_forward(&mut s, prompt, report, None)?;
                let (targets, mask) = targets_and_mask(prompt.len(), report);
                tokens += report.len() + 1;
                let l = s.tape.nll_sum(logits, &targets, &mask)?;
                total = Some(match total {
                    Some(t) => s.tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("batch is non-empty");
            let loss = s.tape.scale(total, 1.0 / tokens as f64)?;
            (s.into_tape(), loss, tokens)
        };
        let nll = tape.value(loss).data()[0];
        params.zero_grad();
        tape.backward_into(loss, params)?;
        drop(tape);
        clip_grad_norm(params, cfg.grad_clip_norm);
        opt.step(params);
        params.zero_grad();
        tokens_seen += tokens;
        records.push(LossRecord {
            step,
            nll,
            tokens_seen,
            lr: cfg.pretrain_learning_rate,
        });
    }
    Ok(records)
}

/// Loss of one example, for gradient checks.
pub fn example_loss(
    model: &EmrrgModel,
    ex: &Example,
    prompt: &[usize],
    max_report_len: usize,
) -> Result<(Tape, Var)> {
    let mut s = Session::new(&model.params, &model.adapters);
    let (loss, _) = batch_loss(model, &mut s, &[ex], prompt, max_report_len, true)?;
    Ok((s.into_tape(), loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{BOS, SEP};

    #[test]
    fn layout_masks_prompt() {
        let (t, m) = targets_and_mask(2, &[10, 11]);
        // [BOS] p p [SEP] 10 11 -> predicts p p SEP 10 11 EOS
        assert_eq!(t.len(), 6);
        assert_eq!(&t[2..], &[SEP, 10, 11, EOS]);
        assert_eq!(m, [false, false, false, true, true, true]);
        assert_ne!(t[0], BOS);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 16]));
        let l = nll_loss(&mut tape, logits, &[1, 2, 3], &[true, true, false]).unwrap();
        assert!((tape.value(l).data()[0] - libm::log(16.0)).abs() < 1e-12);
        assert!(matches!(
            nll_loss(&mut tape, logits, &[1, 2, 3], &[false; 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn validation_schedule() {
        assert_eq!(validation_points(10, 1.0), [10]);
        assert_eq!(validation_points(10, 0.5), [5, 10]);
        assert_eq!(validation_points(3, 0.25), [1, 2, 3]);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            validate_every: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
