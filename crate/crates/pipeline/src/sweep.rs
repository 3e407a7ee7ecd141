//! Ablation sweeps over crop padding, artefact rate and the top-K decode.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use cephalo_core::decode::decode_topk_weighted;
use cephalo_core::geometry::{remap_coords, Point2};
use cephalo_core::metrics::{EvalReport, ImageEval};
use cephalo_core::region::FallbackMode;
use cephalo_core::{Record, Report};
use cephalo_net::train::{batch_from_planes, tensor_to_array4};
use cephalo_net::{LandmarkModel, Mode};

use crate::config::RunConfig;
use crate::report::{SweepKind, SweepPoint, SweepResult};
use crate::samples::{crop_records, CropMode, CropSample};
use crate::trainer::{ensure_folds, evaluate_crops, fit, FitOptions};

pub const PADDINGS: [f64; 5] = [16.0, 32.0, 64.0, 96.0, 128.0];

/// Train and evaluation image ids of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSplit {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl SweepSplit {
    /// Fold `fold` of the stored (or freshly split) assignment is held out.
    pub fn from_fold(
        config: &RunConfig,
        records: &[Record],
        out_dir: &Path,
        fold: usize,
    ) -> Result<Self> {
        let folds = ensure_folds(config, records, out_dir)?;
        if fold >= folds.n_folds {
            bail!("fold {fold} outside 0..{}", folds.n_folds);
        }
        Ok(Self {
            train: folds
                .complement(fold)
                .into_iter()
                .map(String::from)
                .collect(),
            eval: folds.members(fold).into_iter().map(String::from).collect(),
        })
    }

    /// Explicit id lists, one id per line.
    pub fn from_files(train: &Path, eval: &Path) -> Result<Self> {
        Ok(Self {
            train: read_ids(train)?,
            eval: read_ids(eval)?,
        })
    }

    fn pick<'r>(ids: &[String], records: &'r [Record]) -> Result<Vec<&'r Record>> {
        ids.iter()
            .map(|id| {
                records
                    .iter()
                    .find(|r| &r.image_id == id)
                    .with_context(|| format!("unknown image id '{id}'"))
            })
            .collect()
    }

    pub fn records<'r>(&self, records: &'r [Record]) -> Result<(Vec<&'r Record>, Vec<&'r Record>)> {
        if self.train.is_empty() || self.eval.is_empty() {
            bail!("sweep split needs non-empty train and eval id lists");
        }
        Ok((
            Self::pick(&self.train, records)?,
            Self::pick(&self.eval, records)?,
        ))
    }
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// The padding axis: five ground-truth paddings then both fallbacks.
pub fn padding_modes() -> Vec<(String, Option<f64>, CropMode)> {
    let mut out: Vec<_> = PADDINGS
        .iter()
        .map(|p| (format!("{p}"), Some(*p), CropMode::GroundTruth { pad: *p }))
        .collect();
    out.push((
        "pad_crop".into(),
        None,
        CropMode::Fallback {
            mode: FallbackMode::PadCrop,
        },
    ));
    out.push((
        "pad_resize".into(),
        None,
        CropMode::Fallback {
            mode: FallbackMode::PadResize,
        },
    ));
    out
}

pub fn artefact_rates() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn point(label: String, x: Option<f64>, report: Result<Report>) -> SweepPoint {
    match report {
        Ok(r) => SweepPoint {
            label,
            x,
            mre_mm: Some(r.mre_mm),
            sdr_2mm_pct: Some(r.sdr_2mm_pct),
        },
        Err(e) => {
            log::warn!("sweep point {label} failed: {e:#}");
            SweepPoint {
                label,
                x,
                mre_mm: None,
                sdr_2mm_pct: None,
            }
        }
    }
}

/// Trains on `train`, then scores the best checkpoint on `eval`.
fn train_and_score(
    config: &RunConfig,
    train: &[CropSample],
    eval: &[CropSample],
    dir: &Path,
) -> Result<(PathBuf, Report)> {
    std::fs::create_dir_all(dir)?;
    let checkpoint = dir.join("model.safetensors");
    let opts = FitOptions {
        checkpoint: Some(checkpoint.clone()),
        dump_dir: Some(dir.to_path_buf()),
        ..Default::default()
    };
    let out = fit(config, train, eval, &opts)?;
    std::fs::write(
        dir.join("history.json"),
        serde_json::to_string_pretty(&out.history)?,
    )?;
    let (best, _) = LandmarkModel::load_checkpoint(&checkpoint, DType::F32)?;
    let report = evaluate_crops(&[&best], eval, config.top_k, config.topk_weighting)?;
    Ok((checkpoint, report))
}

pub fn sweep_padding(
    config: &RunConfig,
    records: &[Record],
    split: &SweepSplit,
    out_dir: &Path,
) -> Result<SweepResult> {
    let (train_recs, eval_recs) = split.records(records)?;
    let mut points = Vec::new();
    for (label, x, mode) in padding_modes() {
        let dir = out_dir.join(format!("padding_{label}"));
        let score = (|| {
            let train = crop_records(&train_recs, mode, &config.region)?;
            let eval = crop_records(&eval_recs, mode, &config.region)?;
            Ok(train_and_score(config, &train, &eval, &dir)?.1)
        })();
        points.push(point(label, x, score));
    }
    Ok(SweepResult {
        kind: SweepKind::Padding,
        run_config_hash: config.hash()?,
        points,
    })
}

pub fn sweep_artefact_rate(
    config: &RunConfig,
    records: &[Record],
    split: &SweepSplit,
    rates: &[f64],
    out_dir: &Path,
) -> Result<SweepResult> {
    if rates.is_empty() {
        bail!("no artefact rates to sweep");
    }
    let (train_recs, eval_recs) = split.records(records)?;
    let mode = CropMode::GroundTruth {
        pad: config.rcnn_pad,
    };
    let train = crop_records(&train_recs, mode, &config.region)?;
    let eval = crop_records(&eval_recs, mode, &config.region)?;
    let mut points = Vec::new();
    for &rate in rates {
        let mut cfg = config.clone();
        cfg.augmentation.artefact_rate = rate;
        let label = format!("{rate}");
        let score = cfg.validate().and_then(|_| {
            train_and_score(
                &cfg,
                &train,
                &eval,
                &out_dir.join(format!("artefact_{label}")),
            )
            .map(|r| r.1)
        });
        points.push(point(label, Some(rate), score));
    }
    Ok(SweepResult {
        kind: SweepKind::ArtefactRate,
        run_config_hash: config.hash()?,
        points,
    })
}

/// Decodes each evaluation image once per K from a single forward pass.
pub fn sweep_top_k(
    config: &RunConfig,
    records: &[Record],
    split: &SweepSplit,
    checkpoint: Option<&Path>,
    ks: &[usize],
    out_dir: &Path,
) -> Result<SweepResult> {
    if ks.is_empty() {
        bail!("no K values to sweep");
    }
    let (train_recs, eval_recs) = split.records(records)?;
    let mode = CropMode::GroundTruth {
        pad: config.rcnn_pad,
    };
    let eval = crop_records(&eval_recs, mode, &config.region)?;
    let checkpoint = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            let train = crop_records(&train_recs, mode, &config.region)?;
            train_and_score(config, &train, &eval, &out_dir.join("top_k_model"))?.0
        }
    };
    let (model, _) = LandmarkModel::load_checkpoint(&checkpoint, DType::F32)?;
    // preds[k][image]
    let mut preds: Vec<Vec<Vec<Point2<f64>>>> = vec![Vec::with_capacity(eval.len()); ks.len()];
    let mut failed = vec![None; ks.len()];
    for c in &eval {
        let x = batch_from_planes(&[&c.pixels], model.dtype())?;
        let y = tensor_to_array4(&model.forward(&x, &mut Mode::Eval)?)?;
        let planes: Vec<_> = y
            .index_axis(ndarray::Axis(0), 0)
            .outer_iter()
            .map(|p| p.mapv(f64::from))
            .collect();
        for (i, &k) in ks.iter().enumerate() {
            let coords: cephalo_core::Result<Vec<_>> = planes
                .iter()
                .map(|p| decode_topk_weighted(p.view(), k, config.topk_weighting))
                .collect();
            match coords {
                Ok(c_) => preds[i].push(remap_coords(&c_, &c.transform)),
                Err(e) => failed[i] = Some(e.to_string()),
            }
        }
    }
    let points = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let report = match &failed[i] {
                Some(e) => Err(anyhow::anyhow!("{e}")),
                None => {
                    let evals: Vec<ImageEval<f64>> = eval
                        .iter()
                        .zip(&preds[i])
                        .map(|(c, p)| ImageEval {
                            image_id: &c.image_id,
                            pred: p,
                            gt: &c.gt,
                            spacing: c.spacing,
                        })
                        .collect();
                    EvalReport::compute(&evals).map_err(anyhow::Error::from)
                }
            };
            point(k.to_string(), Some(k as f64), report)
        })
        .collect();
    Ok(SweepResult {
        kind: SweepKind::TopK,
        run_config_hash: config.hash()?,
        points,
    })
}
