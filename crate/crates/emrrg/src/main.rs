use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emrrg::commands::{self, Grid, Source};
use emrrg::config::RunConfig;
use emrrg::error::AppError;
use emrrg::{table, threads_from_env};
use emrrg_core::corpus::SyntheticSpec;
use emrrg_core::metrics::Averaging;

#[derive(Parser)]
#[command(
    name = "emrrg",
    version,
    about = "Chest X-ray report generation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Avg {
    Micro,
    Macro,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic image/report corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train from a run config and write checkpoint, history and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides both the init seed and the data-order seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy-decode reports for a dataset split or an image file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory, used with --split.
        #[arg(long, conflicts_with = "image")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Image stack file in the dataset image format.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        /// JSONL output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against references.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// JSONL with `id` and `report`, e.g. a dataset split file. Without
        /// it each prediction row needs a `reference` field.
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Avg::Micro)]
        averaging: Avg,
        /// Writes the JSON record here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// table4 (adapter settings) or table5 (component grid).
        #[arg(long)]
        grid: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<RunConfig, AppError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut stdout = std::io::stdout().lock();
    let mut emit = |text: &str| {
        let _ = stdout.write_all(text.as_bytes());
    };
    match cli.cmd {
        Cmd::GenData {
            out,
            seed,
            samples,
            image_size,
        } => {
            let spec = SyntheticSpec {
                n_samples: samples,
                image_size,
                seed,
                ..SyntheticSpec::default()
            };
            let m = commands::gen_data(&out, &spec)?;
            let rows: Vec<Vec<String>> = m
                .counts
                .iter()
                .map(|(k, v)| vec![k.clone(), v.to_string()])
                .collect();
            emit(&table::render(&["split", "samples"], &rows, 1));
        }
        Cmd::Train { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let log_path = cfg.out.join("train_log.jsonl");
            std::fs::create_dir_all(&cfg.out).map_err(|e| AppError::io(&cfg.out, e))?;
            let mut log = std::io::BufWriter::new(
                std::fs::File::create(&log_path).map_err(|e| AppError::io(&log_path, e))?,
            );
            let r = commands::train(&cfg, &mut log)?;
            log.flush().map_err(|e| AppError::io(&log_path, e))?;
            let m = &r.manifest;
            let best = m.best_validation.as_ref();
            let rows = vec![vec![
                m.steps.to_string(),
                best.map(|b| table::num(b.bleu4))
                    .unwrap_or_else(|| "-".into()),
                best.map(|b| table::num(b.nll))
                    .unwrap_or_else(|| "-".into()),
                m.trainable_params.to_string(),
                m.predicted_trainable.to_string(),
                m.data_order_hash.clone(),
            ]];
            emit(&table::render(
                &[
                    "steps",
                    "val BLEU-4",
                    "val NLL",
                    "trainable",
                    "predicted",
                    "data order",
                ],
                &rows,
                0,
            ));
        }
        Cmd::Generate {
            checkpoint,
            data,
            split,
            image,
            max_len,
            out,
        } => {
            let source = match (&data, &image) {
                (Some(d), None) => Source::Split {
                    dataset: d,
                    split: &split,
                },
                (None, Some(i)) => Source::Images(i),
                _ => {
                    return Err(AppError::Config(
                        "give either --data (with --split) or --image".into(),
                    ))
                }
            };
            let preds = commands::generate(&checkpoint, source, max_len)?;
            let text = commands::predictions_jsonl(&preds);
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| AppError::io(&p, e))?,
                None => emit(&text),
            }
        }
        Cmd::Eval {
            predictions,
            references,
            averaging,
            out,
        } => {
            let avg = match averaging {
                Avg::Micro => Averaging::Micro,
                Avg::Macro => Averaging::Macro,
            };
            let r = commands::eval(&predictions, references.as_deref(), avg)?;
            let record = r.record() + "\n";
            if let Some(p) = out {
                std::fs::write(&p, &record).map_err(|e| AppError::io(&p, e))?;
            }
            emit(&record);
            emit(&r.table());
        }
        Cmd::Ablate {
            config,
            grid,
            seed,
            out,
        } => {
            let grid: Grid = grid.parse()?;
            let cfg = load_config(&config, seed, out)?;
            let report = commands::ablate(&cfg, grid, threads_from_env()?)?;
            emit(&commands::render_ablation(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("emrrg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
