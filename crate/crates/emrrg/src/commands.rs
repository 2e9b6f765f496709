//! The five subcommands, as library functions returning their outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use emrrg_core::corpus::{generate as generate_corpus, to_examples, SyntheticSpec};
use emrrg_core::metrics::{Averaging, MetricReport, METRIC_NOTES};
use emrrg_core::model::ComponentRow;
use emrrg_core::peft::TuningSetting;
use emrrg_core::train::{
    fit, generate_reports, pretrain_language_model, Example, FitEvent, LossRecord, ValidationRecord,
};
use emrrg_core::vocab::{Vocabulary, PROMPT};
use emrrg_core::{EmrrgModel, ModelConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{self, DatasetManifest};
use crate::error::{read, read_string, write, AppError, Result};
use crate::{checkpoint, published, sha256_hex, table};

pub const CHECKPOINT_FILE: &str = "checkpoint.emrrg";

pub fn gen_data(out: &Path, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    spec.validate()
        .map_err(|e| AppError::Config(e.to_string()))?;
    let data = generate_corpus(spec)?;
    dataset::save(out, spec, &data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// sha256 of the JSON model and train config.
    pub config_sha256: String,
    pub seed: u64,
    pub dataset_sha256: String,
    /// FNV-64 of the training example order, hex.
    pub data_order_hash: String,
    pub steps: usize,
    pub pretrain_steps: usize,
    pub best_validation: Option<ValidationRecord>,
    pub total_params: usize,
    pub trainable_params: usize,
    pub predicted_trainable: usize,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub pretrain: Vec<LossRecord>,
    pub losses: Vec<LossRecord>,
    pub validations: Vec<ValidationRecord>,
    pub best: Option<usize>,
}

pub fn config_hash(model: &ModelConfig, train: &emrrg_core::train::TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    sha256_hex(&json)
}

struct Prepared {
    hash: String,
    vocab: Vocabulary,
    prompt: Vec<usize>,
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let loaded = dataset::load(&cfg.dataset)?;
    let vocab = loaded.data.vocabulary();
    Ok(Prepared {
        prompt: vocab.encode(PROMPT),
        train: to_examples(&loaded.data.train, &vocab),
        val: to_examples(&loaded.data.val, &vocab),
        test: to_examples(&loaded.data.test, &vocab),
        hash: loaded.hash,
        vocab,
    })
}

fn report_ids(examples: &[Example]) -> Vec<Vec<usize>> {
    examples.iter().map(|e| e.report_ids.clone()).collect()
}

/// Log records carry wall-clock time and are the only non-reproducible output.
fn log_record(log: &mut dyn Write, phase: &str, r: &LossRecord, start: Instant) {
    let _ = writeln!(
        log,
        "{{\"phase\":\"{phase}\",\"step\":{},\"nll\":{},\"lr\":{},\"tokens_seen\":{},\"wall_clock_s\":{:.3}}}",
        r.step,
        r.nll,
        r.lr,
        r.tokens_seen,
        start.elapsed().as_secs_f64()
    );
}

pub struct TrainOutput {
    pub manifest: RunManifest,
    pub history: History,
    pub model: EmrrgModel,
    pub vocab: Vocabulary,
}

/// Pretrains the decoder on text, fits, writes `checkpoint.emrrg`,
/// `history.json` and `manifest.json` under `cfg.out`.
pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutput> {
    let p = prepare(cfg)?;
    let model_cfg = cfg.model_for_vocab(p.vocab.len())?;
    let mut model = EmrrgModel::new(&model_cfg)?;
    let start = Instant::now();
    let pretrain =
        pretrain_language_model(&mut model, &report_ids(&p.train), &p.prompt, &cfg.train)?;
    for r in &pretrain {
        log_record(log, "pretrain", r, start);
    }
    let result = fit(
        &mut model,
        &p.train,
        &p.val,
        &p.prompt,
        &p.vocab,
        &cfg.train,
        &mut |e| {
            if let FitEvent::Step(r) = e {
                log_record(log, "fit", r, start);
            }
        },
    )?;
    let ckpt = checkpoint::save(&cfg.out.join(CHECKPOINT_FILE), &model, &p.vocab)?;
    let count = model.count_trainable();
    let manifest = RunManifest {
        tool: concat!("emrrg ", env!("CARGO_PKG_VERSION")).into(),
        command: "train".into(),
        config_sha256: config_hash(&model_cfg, &cfg.train),
        seed: cfg.train.seed,
        dataset_sha256: p.hash.clone(),
        data_order_hash: format!("{:016x}", result.data_order_hash),
        steps: result.steps,
        pretrain_steps: pretrain.len(),
        best_validation: result.best.map(|i| result.validations[i].clone()),
        total_params: count.total,
        trainable_params: count.trainable,
        predicted_trainable: model_cfg.predicted_trainable(),
        checkpoint_sha256: sha256_hex(&ckpt),
    };
    let history = History {
        pretrain,
        losses: result.losses,
        validations: result.validations,
        best: result.best,
    };
    write(&cfg.out.join("history.json"), pretty(&history))?;
    write(&cfg.out.join("manifest.json"), pretty(&manifest))?;
    Ok(TrainOutput {
        manifest,
        history,
        model,
        vocab: p.vocab,
    })
}

pub fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain records serialize") + "\n"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
}

pub enum Source<'a> {
    Split { dataset: &'a Path, split: &'a str },
    Images(&'a Path),
}

fn check_image(cfg: &ModelConfig, image: &Tensor, id: &str) -> Result<()> {
    let e = &cfg.encoder;
    let want = [e.channels, e.image_size, e.image_size];
    if image.shape() != want {
        return Err(AppError::Config(format!(
            "image `{id}` has shape {:?}, the encoder expects {:?}",
            image.shape(),
            want
        )));
    }
    Ok(())
}

pub fn generate(ckpt: &Path, source: Source<'_>, max_len: usize) -> Result<Vec<Prediction>> {
    let (model, vocab) = checkpoint::load(ckpt)?;
    let items: Vec<(String, Tensor)> = match source {
        Source::Split {
            dataset: dir,
            split,
        } => {
            if !dataset::SPLITS.contains(&split) {
                return Err(AppError::Config(format!(
                    "unknown split `{split}`; expected train, val or test"
                )));
            }
            let (manifest, _) = dataset::read_manifest(dir)?;
            dataset::load_split(dir, &manifest, split)?
                .into_iter()
                .map(|s| (s.id, s.image))
                .collect()
        }
        Source::Images(path) => {
            let images = dataset::decode_images(path, &read(path)?)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let n = images.len();
            images
                .into_iter()
                .enumerate()
                .map(|(i, img)| {
                    (
                        if n == 1 {
                            stem.clone()
                        } else {
                            format!("{stem}-{i:05}")
                        },
                        img,
                    )
                })
                .collect()
        }
    };
    let prompt = vocab.encode(PROMPT);
    items
        .into_iter()
        .map(|(id, image)| {
            check_image(&model.cfg, &image, &id)?;
            let ids = model.generate(&image, &prompt, max_len + 1)?;
            Ok(Prediction {
                id,
                prediction: vocab.decode(&ids)?,
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct Reference {
    id: String,
    report: String,
}

/// Prediction row; `reference` is only read when no reference file is given.
#[derive(Deserialize)]
struct EvalRow {
    id: String,
    #[serde(alias = "report")]
    prediction: String,
    #[serde(default)]
    reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub n: usize,
}

impl EvalOutput {
    /// One-line JSON record, columns in table order.
    pub fn record(&self) -> String {
        let cols: Vec<String> = MetricReport::COLUMNS
            .iter()
            .zip(self.report.values())
            .map(|(c, v)| {
                format!(
                    "{}:{}",
                    serde_json::to_string(c).unwrap(),
                    serde_json::to_string(&v).unwrap()
                )
            })
            .collect();
        format!("{{\"n\":{},{}}}", self.n, cols.join(","))
    }

    /// Aligned table under a header line naming the metric variants.
    pub fn table(&self) -> String {
        let row = self
            .report
            .values()
            .iter()
            .map(|&v| table::num(v))
            .collect();
        format!(
            "# {}\n{}",
            METRIC_NOTES,
            table::render(&MetricReport::COLUMNS, &[row], 0)
        )
    }
}

fn align(preds: &[(String, String)], refs: &[(String, String)]) -> Result<Vec<(usize, usize)>> {
    let by_id: BTreeMap<&str, usize> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| (p.0.as_str(), i))
        .collect();
    let ref_ids: BTreeSet<&str> = refs.iter().map(|r| r.0.as_str()).collect();
    let missing: Vec<&str> = refs
        .iter()
        .map(|r| r.0.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let extra: Vec<&str> = by_id
        .keys()
        .copied()
        .filter(|id| !ref_ids.contains(id))
        .collect();
    if !missing.is_empty()
        || !extra.is_empty()
        || by_id.len() != preds.len()
        || ref_ids.len() != refs.len()
    {
        return Err(AppError::Config(format!(
            "prediction/reference ids do not align; missing predictions: [{}]; unknown ids: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    Ok(refs
        .iter()
        .enumerate()
        .map(|(j, r)| (by_id[r.0.as_str()], j))
        .collect())
}

/// Scores `(id, text)` predictions against `(id, text)` references, in
/// reference order.
pub fn evaluate(
    preds: &[(String, String)],
    refs: &[(String, String)],
    averaging: Averaging,
) -> Result<EvalOutput> {
    let pairs = align(preds, refs)?;
    let p: Vec<&str> = pairs.iter().map(|&(i, _)| preds[i].1.as_str()).collect();
    let r: Vec<&str> = pairs.iter().map(|&(_, j)| refs[j].1.as_str()).collect();
    Ok(EvalOutput {
        report: MetricReport::compute(&p, &r, averaging)?,
        n: refs.len(),
    })
}

/// Without `refs_path`, every prediction row must carry a `reference`.
pub fn eval(
    preds_path: &Path,
    refs_path: Option<&Path>,
    averaging: Averaging,
) -> Result<EvalOutput> {
    let rows: Vec<EvalRow> = dataset::parse_jsonl(preds_path, &read_string(preds_path)?)?;
    let refs: Vec<(String, String)> = match refs_path {
        Some(path) => dataset::parse_jsonl::<Reference>(path, &read_string(path)?)?
            .into_iter()
            .map(|r| (r.id, r.report))
            .collect(),
        None => rows
            .iter()
            .map(|r| {
                r.reference
                    .clone()
                    .map(|t| (r.id.clone(), t))
                    .ok_or_else(|| {
                        AppError::Config(format!(
                            "row `{}` has no reference and no reference file was given",
                            r.id
                        ))
                    })
            })
            .collect::<Result<_>>()?,
    };
    let preds: Vec<(String, String)> = rows.into_iter().map(|r| (r.id, r.prediction)).collect();
    evaluate(&preds, &refs, averaging)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    Tuning,
    Component,
}

impl std::str::FromStr for Grid {
    type Err = AppError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table4" | "tuning" => Ok(Grid::Tuning),
            "table5" | "component" => Ok(Grid::Component),
            _ => Err(AppError::Config(format!(
                "unknown grid `{s}`; expected table4 (tuning) or table5 (component)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub ssm: Option<String>,
    pub lm: Option<String>,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub ce_f1: f64,
    pub total_params: usize,
    pub trainable_params: usize,
    pub predicted_trainable: usize,
    pub data_order_hash: String,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: String,
    pub seed: u64,
    pub dataset_sha256: String,
    pub rows: Vec<CellResult>,
}

struct Cell {
    label: String,
    ssm: Option<String>,
    lm: Option<String>,
    cfg: ModelConfig,
}

fn cells(grid: Grid, base: &ModelConfig) -> Vec<Cell> {
    match grid {
        Grid::Tuning => TuningSetting::ALL
            .iter()
            .map(|&s| Cell {
                label: s.label().into(),
                ssm: None,
                lm: None,
                cfg: base.tuning_cell(s),
            })
            .collect(),
        Grid::Component => ComponentRow::ALL
            .iter()
            .map(|&r| Cell {
                label: r.label(),
                ssm: Some(r.ssm.to_string()),
                lm: Some(r.lm.to_string()),
                cfg: base.component_cell(r),
            })
            .collect(),
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

/// Trains one cell per grid row with shared seed and data. The decoder is
/// pretrained once on text and copied into every cell. Cells run on
/// `threads` workers; results do not depend on the thread count.
pub fn ablate(cfg: &RunConfig, grid: Grid, threads: usize) -> Result<AblationReport> {
    let p = prepare(cfg)?;
    let base = cfg.model_for_vocab(p.vocab.len())?;
    let cells = cells(grid, &base);
    for c in &cells {
        c.cfg
            .validate()
            .map_err(|e| AppError::Config(format!("cell {}: {e}", c.label)))?;
    }
    let mut reference = EmrrgModel::new(&cells[0].cfg)?;
    pretrain_language_model(&mut reference, &report_ids(&p.train), &p.prompt, &cfg.train)?;
    let pretrained: Vec<(String, Tensor)> = reference
        .lm
        .base_param_ids()
        .into_iter()
        .map(|id| {
            (
                reference.params.get(id).name.clone(),
                reference.params.value(id).clone(),
            )
        })
        .collect();

    let run_cell = |cell: &Cell| -> Result<CellResult> {
        let mut model = EmrrgModel::new(&cell.cfg)?;
        for (name, value) in &pretrained {
            let id = model
                .params
                .find(name)
                .expect("every cell shares the decoder layout");
            *model.params.value_mut(id) = value.clone();
        }
        let result = fit(
            &mut model,
            &p.train,
            &p.val,
            &p.prompt,
            &p.vocab,
            &cfg.train,
            &mut |_| {},
        )?;
        let preds = generate_reports(
            &model,
            &p.test,
            &p.prompt,
            &p.vocab,
            cfg.train.max_report_len,
        )?;
        let pr: Vec<&str> = preds.iter().map(String::as_str).collect();
        let rr: Vec<&str> = p.test.iter().map(|e| e.report.as_str()).collect();
        let m = MetricReport::compute(&pr, &rr, Averaging::Micro)?;
        let counts = model.count_trainable();
        Ok(CellResult {
            label: cell.label.clone(),
            ssm: cell.ssm.clone(),
            lm: cell.lm.clone(),
            bleu: m.bleu,
            rouge_l: m.rouge_l,
            meteor: m.meteor,
            cider: m.cider,
            ce_f1: m.ce_f1,
            total_params: counts.total,
            trainable_params: counts.trainable,
            predicted_trainable: cell.cfg.predicted_trainable(),
            data_order_hash: format!("{:016x}", result.data_order_hash),
            steps: result.steps,
        })
    };

    let slots: Vec<Mutex<Option<Result<CellResult>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell(&cells[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let rows = slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;

    let report = AblationReport {
        grid: match grid {
            Grid::Tuning => "table4".into(),
            Grid::Component => "table5".into(),
        },
        seed: cfg.train.seed,
        dataset_sha256: p.hash,
        rows,
    };
    for (cell, row) in cells.iter().zip(&report.rows) {
        let dir = cfg.out.join("cells").join(slug(&cell.label));
        let manifest = RunManifest {
            tool: concat!("emrrg ", env!("CARGO_PKG_VERSION")).into(),
            command: format!("ablate {}", report.grid),
            config_sha256: config_hash(&cell.cfg, &cfg.train),
            seed: cfg.train.seed,
            dataset_sha256: report.dataset_sha256.clone(),
            data_order_hash: row.data_order_hash.clone(),
            steps: row.steps,
            pretrain_steps: cfg.train.pretrain_steps,
            best_validation: None,
            total_params: row.total_params,
            trainable_params: row.trainable_params,
            predicted_trainable: row.predicted_trainable,
            checkpoint_sha256: String::new(),
        };
        write(&dir.join("manifest.json"), pretty(&manifest))?;
    }
    write(&cfg.out.join("ablation.json"), pretty(&report))?;
    write(&cfg.out.join("ablation.txt"), render_ablation(&report))?;
    Ok(report)
}

pub fn render_ablation(report: &AblationReport) -> String {
    let component = report.grid == "table5";
    let mut headers: Vec<&str> = if component {
        vec!["Index", "SSM", "LLM"]
    } else {
        vec!["Setting"]
    };
    let text_cols = headers.len();
    headers.extend([
        "B1",
        "B2",
        "B3",
        "B4",
        "R-L",
        "M",
        "C",
        "CE-F1",
        "trainable",
    ]);
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            if component {
                row.push(r.ssm.clone().unwrap_or_default());
                row.push(r.lm.clone().unwrap_or_default());
            }
            row.extend(r.bleu.iter().map(|&v| table::num(v)));
            row.extend(
                [r.rouge_l, r.meteor, r.cider, r.ce_f1]
                    .iter()
                    .map(|&v| table::num(v)),
            );
            row.push(r.trainable_params.to_string());
            row
        })
        .collect();
    let mut out = table::render(&headers, &rows, text_cols);

    let reference = if component {
        &published::COMPONENT[..]
    } else {
        &published::TUNING[..]
    };
    let mut ref_headers = vec![headers[0]];
    ref_headers.extend(published::COLUMNS);
    let ref_rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .filter_map(|r| {
            published::lookup(reference, &r.label).map(|v| {
                let mut row = vec![r.label.clone()];
                row.extend(v.iter().map(|x| format!("{x:.3}")));
                row
            })
        })
        .collect();
    out += "\nreference: published IU X-ray scores for the same rows (annotation only)\n";
    out += &table::render(&ref_headers, &ref_rows, 1);
    out
}

pub fn predictions_jsonl(preds: &[Prediction]) -> String {
    dataset::to_jsonl(preds)
}
