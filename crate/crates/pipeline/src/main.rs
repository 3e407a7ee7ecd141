use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cephalo::config::RunConfig;
use cephalo::evaluate::{evaluate_bundles, load_bundles, write_report};
use cephalo::predict::{predict_records, scan_images, write_outputs, Predictor};
use cephalo::report::{cv_table, plot_sweep, CvRow, SweepKind, SweepResult};
use cephalo::samples::CropMode;
use cephalo::sweep::{artefact_rates, sweep_artefact_rate, sweep_padding, sweep_top_k, SweepSplit};
use cephalo::synth::{write_synthetic_dataset, SynthOptions};
use cephalo::trainer::{ensure_folds, train_all, train_fold, train_region_detector, CvSummary};
use cephalo_core::dataset::load_dataset;
use cephalo_core::region::FallbackMode;
use cephalo_core::Record;
use cephalo_net::detector::AnchorDetector;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "cephalo",
    version,
    about = "Cephalometric landmark detection: training, inference and reports"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root holding the images and annotation CSV.
    #[arg(long, global = true, env = "CEPHALO_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Output directory for checkpoints, predictions and reports.
    #[arg(long, global = true, env = "CEPHALO_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Directory searched for named pretrained weights.
    #[arg(long, global = true, env = "CEPHALO_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Overrides augmentation.artefact_rate.
    #[arg(long, global = true)]
    artefact_rate: Option<f64>,
    /// Overrides max_epochs.
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CropArg {
    /// Landmark extremes padded by rcnn_pad.
    Gt,
    PadCrop,
    PadResize,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a small synthetic dataset (PNG images and annotations.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 320)]
        height: usize,
        #[arg(long, default_value_t = 288)]
        width: usize,
        #[arg(long, default_value_t = 0.1)]
        spacing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains the face-region detector on ground-truth boxes.
    TrainDetector,
    /// Trains the heatmap model of one cross-validation fold.
    TrainLandmarks {
        #[arg(long)]
        fold: usize,
        #[arg(long, value_enum, default_value = "gt")]
        crop: CropArg,
    },
    /// Detector, fold split and every fold, then the fold/ensemble table.
    TrainAll {
        #[arg(long)]
        skip_detector: bool,
    },
    /// Predicts landmarks with one or more checkpoints.
    Predict {
        /// Heatmap checkpoints; several are ensembled.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
        /// Image directory; defaults to the dataset root.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Scores a predictions.json against the dataset annotations.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "run")]
        run: String,
    },
    /// Plots sweep results and tabulates cross-validation summaries.
    Report {
        /// Sweep result files written by `sweep`.
        #[arg(long = "sweep")]
        sweeps: Vec<PathBuf>,
        /// `LABEL=cv_summary.json`, one per table row.
        #[arg(long = "cv")]
        cv: Vec<String>,
    },
    /// Runs one ablation sweep.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        /// Held-out fold when no explicit id lists are given.
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, requires = "eval_ids")]
        train_ids: Option<PathBuf>,
        #[arg(long, requires = "train_ids")]
        eval_ids: Option<PathBuf>,
        /// Artefact rates; defaults to 0, 0.1, ..., 1.0.
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        /// Largest K of the top-k sweep.
        #[arg(long, default_value_t = 25)]
        max_k: usize,
        /// Existing checkpoint for the top-k sweep.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(r) = &g.data_root {
        cfg.data.root = Some(r.clone());
    }
    if let Some(o) = &g.out_dir {
        cfg.data.out_dir = Some(o.clone());
    }
    if let Some(r) = g.artefact_rate {
        cfg.augmentation.artefact_rate = r;
    }
    if let Some(e) = g.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(w) = &g.weights {
        // read by the weight resolver
        std::env::set_var("CEPHALO_WEIGHTS", w);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_records(cfg: &RunConfig) -> Result<Vec<Record>> {
    let root = cfg.data_root()?;
    let ann = cfg.annotation_path()?;
    let records = load_dataset(root, &ann, &cfg.dataset_options())
        .with_context(|| format!("loading dataset from {}", ann.display()))?;
    log::info!(
        "{} annotated images under {}",
        records.len(),
        root.display()
    );
    Ok(records)
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("run_config.toml"), cfg.to_toml()?)?;
    Ok(out)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth {
            out,
            n,
            height,
            width,
            spacing,
            seed,
        } => {
            let opts = SynthOptions {
                n_images: n,
                height,
                width,
                spacing,
                seed,
                ..Default::default()
            };
            write_synthetic_dataset(&out, &opts)?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::TrainDetector => {
            let records = load_records(&cfg)?;
            let out = prepare_out(&cfg)?;
            let all: Vec<&Record> = records.iter().collect();
            let det = train_region_detector(&cfg, &all)?;
            let path = out.join("detector.safetensors");
            det.save(&path)?;
            println!("{}", path.display());
        }
        Command::TrainLandmarks { fold, crop } => {
            let records = load_records(&cfg)?;
            let out = prepare_out(&cfg)?;
            let folds = ensure_folds(&cfg, &records, &out)?;
            let mode = match crop {
                CropArg::Gt => CropMode::GroundTruth { pad: cfg.rcnn_pad },
                CropArg::PadCrop => CropMode::Fallback {
                    mode: FallbackMode::PadCrop,
                },
                CropArg::PadResize => CropMode::Fallback {
                    mode: FallbackMode::PadResize,
                },
            };
            let outcome = train_fold(&cfg, &records, &folds, fold, mode, &out)?;
            println!(
                "fold {fold}: best val MRE {:.4} mm at epoch {} -> {}",
                outcome.best_val_mre_mm,
                outcome.best_epoch,
                outcome.checkpoint.display()
            );
        }
        Command::TrainAll { skip_detector } => {
            let records = load_records(&cfg)?;
            let out = prepare_out(&cfg)?;
            let summary = train_all(&cfg, &records, &out, !skip_detector)?;
            let rows = [CvRow {
                method: cfg.model.variant.to_string(),
                summary: &summary,
            }];
            let (csv, _) = cv_table(&rows, &out)?;
            println!("{}", csv.display());
        }
        Command::Predict {
            checkpoints,
            detector,
            images,
        } => {
            let dir = match images {
                Some(d) => d,
                None => cfg.data_root()?.to_path_buf(),
            };
            let out = prepare_out(&cfg)?;
            let predictor = Predictor::load(&checkpoints, cfg.top_k, cfg.topk_weighting)?;
            let det = detector.as_deref().map(AnchorDetector::load).transpose()?;
            let (records, mut failed) = scan_images(&dir, &cfg.data.image_ext)?;
            let outcome = predict_records(&predictor, &records, det.as_ref(), &cfg.region);
            failed.extend(outcome.failed);
            let (json, csv) = write_outputs(&out, &outcome.bundles)?;
            println!(
                "{} images predicted: {} and {}",
                outcome.bundles.len(),
                json.display(),
                csv.display()
            );
            if !failed.is_empty() {
                log::error!("{} images skipped: {}", failed.len(), failed.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate { predictions, run } => {
            let records = load_records(&cfg)?;
            let out = prepare_out(&cfg)?;
            let report = evaluate_bundles(&load_bundles(&predictions)?, &records)?;
            write_report(&out, &run, &report)?;
            println!(
                "MRE {:.4} mm, SDR@2mm {:.2}% over {} images",
                report.mre_mm, report.sdr_2mm_pct, report.n_images
            );
        }
        Command::Report { sweeps, cv } => {
            if sweeps.is_empty() && cv.is_empty() {
                bail!("nothing to report: pass --sweep and/or --cv");
            }
            let out = cfg.out_dir().join("report");
            for p in &sweeps {
                let (csv, svg) = plot_sweep(&SweepResult::load(p)?, &out)?;
                println!("{} {}", csv.display(), svg.display());
            }
            if !cv.is_empty() {
                let mut summaries = Vec::new();
                for entry in &cv {
                    let (label, path) = entry.split_once('=').unwrap_or(("model", entry.as_str()));
                    let text =
                        std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
                    let s: CvSummary = serde_json::from_str(&text)?;
                    summaries.push((label.to_string(), s));
                }
                let rows: Vec<CvRow> = summaries
                    .iter()
                    .map(|(m, s)| CvRow {
                        method: m.clone(),
                        summary: s,
                    })
                    .collect();
                let (csv, svg) = cv_table(&rows, &out)?;
                println!("{} {}", csv.display(), svg.display());
            }
        }
        Command::Sweep {
            kind,
            fold,
            train_ids,
            eval_ids,
            rates,
            max_k,
            checkpoint,
        } => {
            let records = load_records(&cfg)?;
            let out = prepare_out(&cfg)?;
            let split = match (train_ids, eval_ids) {
                (Some(t), Some(e)) => SweepSplit::from_files(&t, &e)?,
                _ => SweepSplit::from_fold(&cfg, &records, &out, fold)?,
            };
            let dir = out.join("sweeps");
            let result = match kind {
                SweepKind::Padding => sweep_padding(&cfg, &records, &split, &dir)?,
                SweepKind::ArtefactRate => {
                    let rates = if rates.is_empty() {
                        artefact_rates()
                    } else {
                        rates
                    };
                    sweep_artefact_rate(&cfg, &records, &split, &rates, &dir)?
                }
                SweepKind::TopK => {
                    let ks: Vec<usize> = (1..=max_k).collect();
                    sweep_top_k(&cfg, &records, &split, checkpoint.as_deref(), &ks, &dir)?
                }
            };
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}.json", kind.slug()));
            write_json(&path, &result)?;
            plot_sweep(&result, &out.join("report"))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
