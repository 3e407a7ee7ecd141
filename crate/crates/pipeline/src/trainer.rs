//! Epoch loop with learning-rate decay, gradient accumulation, periodic
//! validation, best-checkpoint selection and early stopping.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use cephalo_core::augment::{augment_sample, AugmentationConfig};
use cephalo_core::decode::TopKWeighting;
use cephalo_core::folds::{split_folds, FoldAssignment};
use cephalo_core::geometry::make_gt_box;
use cephalo_core::imageops::to_scalar;
use cephalo_core::metrics::{EvalReport, ImageEval};
use cephalo_core::region::RegionSource;
use cephalo_core::schedule::{AccumulationSchedule, EarlyStopping, LrSchedule, StopDecision};
use cephalo_core::target::encode_target;
use cephalo_core::{Record, Report};
use cephalo_net::detector::{train_detector, AnchorDetector, DetectorSample};
use cephalo_net::train::{adamw, batch_from_planes, GradAccumulator};
use cephalo_net::{build_model, heatmap_loss, CheckpointMeta, LandmarkModel, Mode};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::predict::bundle_for_crop;
use crate::samples::{crop_records, CropMode, CropSample};

/// What one epoch is told by the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochPlan {
    pub epoch: usize,
    pub lr: f64,
    /// Forward passes per optimizer step.
    pub accumulation: usize,
}

/// The model-specific half of training; [`run_schedule`] drives it.
pub trait EpochDriver {
    /// Returns the mean training loss.
    fn train_epoch(&mut self, plan: &EpochPlan) -> Result<f64>;
    /// Validation MRE in mm.
    fn validate(&mut self, epoch: usize) -> Result<f64>;
    /// Called after each strict improvement, e.g. to write a checkpoint.
    fn on_improved(&mut self, state: &TrainState) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig<'a> {
    pub lr: &'a LrSchedule,
    pub accumulation: &'a AccumulationSchedule,
    pub max_epochs: usize,
    pub patience: usize,
    pub validate_every: usize,
    /// Stop as soon as validation drops below this value.
    pub stop_below: Option<f64>,
}

impl<'a> ScheduleConfig<'a> {
    pub fn from_run(config: &'a RunConfig, lr: &'a LrSchedule) -> Self {
        Self {
            lr,
            accumulation: &config.accumulation_schedule,
            max_epochs: config.max_epochs,
            patience: config.early_stop_patience,
            validate_every: config.validate_every,
            stop_below: None,
        }
    }
}

/// Reproducible position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed_hex: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = hex::decode(&self.seed_hex)?
            .try_into()
            .map_err(|_| anyhow::anyhow!("rng seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse()?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_mre_mm: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub fold_index: Option<usize>,
    pub rng: Option<RngState>,
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub accumulation: usize,
    pub train_loss: f64,
    pub val_mre_mm: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    BelowTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub state: TrainState,
    pub stop_reason: StopReason,
}

/// Runs epochs until `max_epochs`, patience exhaustion or `stop_below`.
/// Patience counts validations, so it equals epochs when `validate_every`
/// is 1.
pub fn run_schedule(
    sched: &ScheduleConfig,
    fold_index: Option<usize>,
    driver: &mut dyn EpochDriver,
) -> Result<TrainHistory> {
    if sched.validate_every == 0 {
        bail!("validate_every must be >= 1");
    }
    sched.accumulation.validate()?;
    let mut stopper = EarlyStopping::new(sched.patience)?;
    let mut state = TrainState {
        epoch: 0,
        best_val_mre_mm: None,
        best_epoch: None,
        epochs_since_improvement: 0,
        fold_index,
        rng: None,
        checkpoint_path: None,
    };
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..sched.max_epochs {
        let plan = EpochPlan {
            epoch,
            lr: sched.lr.lr_at(epoch),
            accumulation: sched.accumulation.interval_at(epoch),
        };
        let train_loss = driver.train_epoch(&plan)?;
        state.epoch = epoch;
        let mut rec = EpochRecord {
            epoch,
            lr: plan.lr,
            accumulation: plan.accumulation,
            train_loss,
            val_mre_mm: None,
            improved: false,
        };
        let due = (epoch + 1) % sched.validate_every == 0 || epoch + 1 == sched.max_epochs;
        if !due {
            epochs.push(rec);
            continue;
        }
        let val = driver.validate(epoch)?;
        if !val.is_finite() {
            bail!("non-finite validation MRE at epoch {epoch}");
        }
        rec.val_mre_mm = Some(val);
        let decision = stopper.observe(epoch, val);
        state.epochs_since_improvement = stopper.epochs_since_improvement;
        if decision == StopDecision::Improved {
            state.best_val_mre_mm = Some(val);
            state.best_epoch = Some(epoch);
            rec.improved = true;
            driver.on_improved(&state)?;
        }
        log::info!(
            "epoch {epoch}: lr {:.3e} acc {} loss {train_loss:.4} val {val:.4} mm{}",
            plan.lr,
            plan.accumulation,
            if rec.improved { " *" } else { "" }
        );
        epochs.push(rec);
        if decision == StopDecision::Stop {
            stop_reason = StopReason::Patience;
            break;
        }
        if sched.stop_below.is_some_and(|t| val < t) {
            stop_reason = StopReason::BelowTarget;
            break;
        }
    }
    Ok(TrainHistory {
        epochs,
        state,
        stop_reason,
    })
}

/// Heatmap training on pre-cut crops, batch size 1.
pub struct HeatmapDriver<'a> {
    pub model: LandmarkModel,
    opt: candle_nn::AdamW,
    acc: GradAccumulator,
    train: &'a [CropSample],
    val: &'a [CropSample],
    augmentation: AugmentationConfig,
    sigma: f64,
    top_k: usize,
    weighting: TopKWeighting,
    rng: ChaCha8Rng,
    /// Where the best weights go; `None` keeps them in memory only.
    pub checkpoint: Option<PathBuf>,
    pub meta: CheckpointMeta,
    /// Directory for the state dump written on a non-finite loss.
    pub dump_dir: Option<PathBuf>,
    /// Forward passes so far.
    pub forward_passes: usize,
    /// Value of `forward_passes` at each optimizer step.
    pub step_log: Vec<usize>,
    last_epoch: usize,
}

impl<'a> HeatmapDriver<'a> {
    pub fn new(
        model: LandmarkModel,
        config: &RunConfig,
        train: &'a [CropSample],
        val: &'a [CropSample],
        seed: u64,
    ) -> Result<Self> {
        if train.is_empty() {
            bail!("empty training split");
        }
        let vars = model.params().vars();
        let opt = adamw(
            vars.clone(),
            config.optimizer.lr,
            config.optimizer.weight_decay,
        )?;
        Ok(Self {
            model,
            opt,
            acc: GradAccumulator::new(vars),
            train,
            val,
            augmentation: config.augmentation.clone(),
            sigma: config.target_sigma,
            top_k: config.top_k,
            weighting: config.topk_weighting,
            rng: ChaCha8Rng::seed_from_u64(seed),
            checkpoint: None,
            meta: CheckpointMeta {
                run_config_hash: config.hash()?,
                seed,
                extra: HashMap::from([("run_config".to_string(), config.to_toml()?)]),
                ..Default::default()
            },
            dump_dir: None,
            forward_passes: 0,
            step_log: Vec::new(),
            last_epoch: 0,
        })
    }

    fn sample_loss(&mut self, s: &CropSample) -> Result<Option<Tensor>> {
        let (img, coords, aug_valid) =
            augment_sample(&s.pixels, &s.coords, &self.augmentation, &mut self.rng)?;
        let (h, w) = img.dim();
        let target = encode_target(&coords, h, w, self.sigma);
        let valid: Vec<bool> = target
            .valid
            .iter()
            .zip(&aug_valid)
            .map(|(a, b)| *a && *b)
            .collect();
        if !valid.iter().any(|v| *v) {
            log::warn!(
                "'{}': no landmark left in frame after augmentation",
                s.image_id
            );
            return Ok(None);
        }
        let dt = self.model.dtype();
        let x = batch_from_planes(&[&img], dt)?;
        let y = self.model.forward(&x, &mut Mode::Train(&mut self.rng))?;
        let planes: Vec<f32> = target.planes.iter().copied().collect();
        let t = Tensor::from_vec(planes, (1, target.planes.dim().0, h, w), &Device::Cpu)?
            .to_dtype(dt)?;
        Ok(Some(heatmap_loss(&y, &t, &[valid])?))
    }

    fn dump_state(&self, epoch: usize, image_id: &str, detail: &str) -> Result<PathBuf> {
        let dir = self.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("nonfinite_state_epoch{epoch}.json"));
        let dump = serde_json::json!({
            "epoch": epoch,
            "image_id": image_id,
            "detail": detail,
            "forward_passes": self.forward_passes,
            "optimizer_steps": self.step_log.len(),
            "lr": self.opt.learning_rate(),
            "rng": RngState::capture(&self.rng),
            "checkpoint": self.checkpoint,
            "run_config_hash": self.meta.run_config_hash,
        });
        std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
        Ok(path)
    }

    /// Validation bundle: MRE/SDR of the current weights on the validation crops.
    pub fn evaluate(&self) -> Result<Report> {
        evaluate_crops(&[&self.model], self.val, self.top_k, self.weighting)
    }
}

impl EpochDriver for HeatmapDriver<'_> {
    fn train_epoch(&mut self, plan: &EpochPlan) -> Result<f64> {
        self.last_epoch = plan.epoch;
        self.opt.set_learning_rate(plan.lr);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut n) = (0.0, 0usize);
        for i in order {
            let s = &self.train[i];
            let Some(loss) = self.sample_loss(s)? else {
                continue;
            };
            let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                let path = self.dump_state(plan.epoch, &s.image_id, "loss")?;
                bail!(
                    "non-finite loss on '{}' at epoch {}; state written to {}",
                    s.image_id,
                    plan.epoch,
                    path.display()
                );
            }
            self.acc.accumulate(&loss)?;
            self.forward_passes += 1;
            total += v;
            n += 1;
            if self.acc.pending() >= plan.accumulation {
                if let Err(e) = self.acc.step(&mut self.opt) {
                    let path = self.dump_state(plan.epoch, &s.image_id, "gradients")?;
                    return Err(anyhow::Error::from(e)
                        .context(format!("state written to {}", path.display())));
                }
                self.step_log.push(self.forward_passes);
            }
        }
        Ok(if n > 0 { total / n as f64 } else { f64::NAN })
    }

    fn validate(&mut self, _epoch: usize) -> Result<f64> {
        Ok(self.evaluate()?.mre_mm)
    }

    fn on_improved(&mut self, state: &TrainState) -> Result<()> {
        self.meta.best_val_mre = state.best_val_mre_mm;
        self.meta.best_epoch = state.best_epoch;
        self.meta.fold = state.fold_index;
        if let Some(path) = &self.checkpoint {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            self.model.save_checkpoint(path, &self.meta)?;
        }
        Ok(())
    }
}

/// MRE/SDR of an ensemble on pre-cut crops, decoded with top-K and mapped
/// back to original pixels.
pub fn evaluate_crops(
    models: &[&LandmarkModel],
    crops: &[CropSample],
    top_k: usize,
    weighting: TopKWeighting,
) -> Result<Report> {
    if crops.is_empty() {
        bail!("empty validation split");
    }
    let preds = crops
        .iter()
        .map(|c| {
            Ok(bundle_for_crop(
                models,
                top_k,
                weighting,
                &c.image_id,
                &c.pixels,
                &c.transform,
                RegionSource::GroundTruth,
            )?
            .ensembled_coords)
        })
        .collect::<Result<Vec<_>>>()?;
    let evals: Vec<ImageEval<f64>> = crops
        .iter()
        .zip(&preds)
        .map(|(c, p)| ImageEval {
            image_id: &c.image_id,
            pred: p,
            gt: &c.gt,
            spacing: c.spacing,
        })
        .collect();
    Ok(EvalReport::compute(&evals)?)
}

/// Options outside the run config.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub fold: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub dump_dir: Option<PathBuf>,
    pub stop_below_mm: Option<f64>,
}

pub struct FitOutput {
    /// Weights after the last epoch run (not necessarily the best).
    pub model: LandmarkModel,
    pub history: TrainHistory,
    pub step_log: Vec<usize>,
}

/// Trains one heatmap model on pre-cut crops.
pub fn fit(
    config: &RunConfig,
    train: &[CropSample],
    val: &[CropSample],
    opts: &FitOptions,
) -> Result<FitOutput> {
    config.validate()?;
    let seed = config
        .seed
        .wrapping_add(opts.fold.map_or(0, |f| f as u64 + 1));
    let model = build_model(&config.model, DType::F32, seed)?;
    let mut driver = HeatmapDriver::new(model, config, train, val, seed)?;
    driver.checkpoint = opts.checkpoint.clone();
    driver.dump_dir = opts.dump_dir.clone();
    let lr = config.lr_schedule();
    let sched = ScheduleConfig {
        stop_below: opts.stop_below_mm,
        ..ScheduleConfig::from_run(config, &lr)
    };
    let mut history = run_schedule(&sched, opts.fold, &mut driver)?;
    history.state.rng = Some(RngState::capture(&driver.rng));
    history.state.checkpoint_path = opts.checkpoint.clone();
    Ok(FitOutput {
        model: driver.model,
        history,
        step_log: driver.step_log,
    })
}

/// Result of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub checkpoint: PathBuf,
    pub best_val_mre_mm: f64,
    pub best_epoch: usize,
    /// The reloaded best checkpoint evaluated on the validation fold.
    pub report: Report,
    pub history: TrainHistory,
}

fn select<'r>(records: &'r [Record], ids: &[&str]) -> Vec<&'r Record> {
    records
        .iter()
        .filter(|r| ids.contains(&r.image_id.as_str()))
        .collect()
}

pub fn fold_dir(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join(format!("fold_{fold}"))
}

/// Trains fold `fold` and evaluates its best checkpoint on the held-out ids.
pub fn train_fold(
    config: &RunConfig,
    records: &[Record],
    folds: &FoldAssignment,
    fold: usize,
    mode: CropMode,
    out_dir: &Path,
) -> Result<FoldOutcome> {
    if fold >= folds.n_folds {
        bail!("fold {fold} outside 0..{}", folds.n_folds);
    }
    let train_recs = select(records, &folds.complement(fold));
    let val_recs = select(records, &folds.members(fold));
    if train_recs.is_empty() || val_recs.is_empty() {
        bail!("fold {fold} has an empty split; does the fold file match the dataset?");
    }
    let train = crop_records(&train_recs, mode, &config.region)?;
    let val = crop_records(&val_recs, mode, &config.region)?;
    let dir = fold_dir(out_dir, fold);
    std::fs::create_dir_all(&dir)?;
    let checkpoint = dir.join("model.safetensors");
    log::info!(
        "fold {fold}: {} train / {} val images",
        train.len(),
        val.len()
    );
    let out = fit(
        config,
        &train,
        &val,
        &FitOptions {
            fold: Some(fold),
            checkpoint: Some(checkpoint.clone()),
            dump_dir: Some(dir.clone()),
            stop_below_mm: None,
        },
    )?;
    let (best, meta) = LandmarkModel::load_checkpoint(&checkpoint, DType::F32)
        .context("reloading best checkpoint")?;
    let report = evaluate_crops(&[&best], &val, config.top_k, config.topk_weighting)?;
    let best_val = meta.best_val_mre.context("checkpoint lacks best_val_mre")?;
    if (report.mre_mm - best_val).abs() > 1e-6 {
        log::warn!(
            "fold {fold}: reloaded MRE {} differs from recorded {best_val}",
            report.mre_mm
        );
    }
    std::fs::write(
        dir.join("history.json"),
        serde_json::to_string_pretty(&out.history)?,
    )?;
    std::fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(FoldOutcome {
        fold,
        checkpoint,
        best_val_mre_mm: best_val,
        best_epoch: meta.best_epoch.unwrap_or(0),
        report,
        history: out.history,
    })
}

/// Face-region detector trained on ground-truth boxes of all records.
pub fn train_region_detector(config: &RunConfig, records: &[&Record]) -> Result<AnchorDetector> {
    let mut planes: Vec<(Array2<f32>, cephalo_core::BBox)> = Vec::with_capacity(records.len());
    for r in records {
        let lm = r
            .landmarks
            .as_ref()
            .with_context(|| format!("'{}' has no landmarks", r.image_id))?;
        let img: Array2<f32> = to_scalar(&*r.pixels()?);
        let bbox = make_gt_box(lm.points(), config.rcnn_pad, img.dim())?;
        planes.push((img, bbox));
    }
    let samples: Vec<DetectorSample> = planes
        .iter()
        .map(|(image, gt)| DetectorSample { image, gt: *gt })
        .collect();
    let train = cephalo_net::detector::DetectorTrainConfig {
        seed: config.seed,
        ..config.detector_train.clone()
    };
    Ok(train_detector(&samples, &config.detector, &train)?)
}

pub fn write_folds(path: &Path, folds: &FoldAssignment) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(folds)?)?;
    Ok(())
}

pub fn read_folds(path: &Path) -> Result<FoldAssignment> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads `folds.json` from `out_dir`, creating it from the records when absent.
pub fn ensure_folds(
    config: &RunConfig,
    records: &[Record],
    out_dir: &Path,
) -> Result<FoldAssignment> {
    let path = out_dir.join("folds.json");
    if path.exists() {
        let folds = read_folds(&path)?;
        if folds.n_folds != config.n_folds {
            bail!(
                "{} has {} folds, config asks for {}",
                path.display(),
                folds.n_folds,
                config.n_folds
            );
        }
        return Ok(folds);
    }
    let ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let folds = split_folds(&ids, config.n_folds, config.seed)?;
    std::fs::create_dir_all(out_dir)?;
    write_folds(&path, &folds)?;
    Ok(folds)
}

/// Per-fold results plus the ensemble of all fold checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<FoldOutcome>,
    /// All fold checkpoints averaged, evaluated on every training image.
    pub ensemble: Option<Report>,
    pub detector: Option<PathBuf>,
}

/// Splits folds, optionally trains the detector, then trains every fold.
pub fn train_all(
    config: &RunConfig,
    records: &[Record],
    out_dir: &Path,
    with_detector: bool,
) -> Result<CvSummary> {
    let folds = ensure_folds(config, records, out_dir)?;
    let detector = if with_detector {
        let all: Vec<&Record> = records.iter().collect();
        let det = train_region_detector(config, &all)?;
        let path = out_dir.join("detector.safetensors");
        det.save(&path)?;
        Some(path)
    } else {
        None
    };
    let mode = CropMode::GroundTruth {
        pad: config.rcnn_pad,
    };
    let outcomes = (0..config.n_folds)
        .map(|k| train_fold(config, records, &folds, k, mode, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let models = outcomes
        .iter()
        .map(|o| Ok(LandmarkModel::load_checkpoint(&o.checkpoint, DType::F32)?.0))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&Record> = records.iter().collect();
    let crops = crop_records(&all, mode, &config.region)?;
    let refs: Vec<&LandmarkModel> = models.iter().collect();
    let ensemble = evaluate_crops(&refs, &crops, config.top_k, config.topk_weighting)?;
    let summary = CvSummary {
        folds: outcomes,
        ensemble: Some(ensemble),
        detector,
    };
    std::fs::write(
        out_dir.join("cv_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
