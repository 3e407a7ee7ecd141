//! Run configuration: one TOML document covering data, model, detector,
//! augmentation and optimisation. Its hash is stamped into every artefact.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cephalo_core::augment::AugmentationConfig;
use cephalo_core::decode::TopKWeighting;
use cephalo_core::region::RegionPolicy;
use cephalo_core::schedule::{AccumulationSchedule, LrSchedule};
use cephalo_net::detector::{DetectorConfig, DetectorTrainConfig};
use cephalo_net::ModelSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the images; overridden by `--data-root` or
    /// `CEPHALO_DATA_ROOT`.
    pub root: Option<PathBuf>,
    /// Annotation CSV, relative to `root` unless absolute.
    pub annotations: PathBuf,
    pub image_ext: String,
    /// Needed only when the CSV leaves spacing empty.
    pub ruler_length_mm: Option<f64>,
    /// Where checkpoints and reports go; overridden by `--out-dir` or
    /// `CEPHALO_OUT_DIR`.
    pub out_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            annotations: PathBuf::from("annotations.csv"),
            image_ext: "png".into(),
            ruler_length_mm: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            lr: 2e-4,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub epochs: Vec<usize>,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            factor: 0.25,
            epochs: vec![35, 45],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub augmentation: AugmentationConfig,
    pub region: RegionPolicy,
    pub optimizer: OptimizerConfig,
    pub accumulation_schedule: AccumulationSchedule,
    pub lr_decay: LrDecay,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Validate every this many epochs; patience counts validations.
    pub validate_every: usize,
    pub n_folds: usize,
    pub top_k: usize,
    pub topk_weighting: TopKWeighting,
    /// Padding around the landmark extremes for ground-truth boxes.
    pub rcnn_pad: f64,
    pub target_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelSpec::default(),
            detector: DetectorConfig::default(),
            detector_train: DetectorTrainConfig::default(),
            augmentation: AugmentationConfig::default(),
            region: RegionPolicy::default(),
            optimizer: OptimizerConfig::default(),
            accumulation_schedule: AccumulationSchedule::default(),
            lr_decay: LrDecay::default(),
            max_epochs: 75,
            early_stop_patience: 10,
            validate_every: 1,
            n_folds: 4,
            top_k: 20,
            topk_weighting: TopKWeighting::Uniform,
            rcnn_pad: 32.0,
            target_sigma: 1.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.optimizer.lr,
            factor: self.lr_decay.factor,
            milestones: self.lr_decay.epochs.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.optimizer.name.eq_ignore_ascii_case("adamw") {
            bail!(
                "unsupported optimizer '{}'; only adamw is implemented",
                self.optimizer.name
            );
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            bail!("learning rate must be > 0 and weight decay >= 0");
        }
        if self.lr_decay.epochs.windows(2).any(|w| w[0] >= w[1]) {
            bail!("lr_decay epochs must be ascending");
        }
        if !(self.lr_decay.factor > 0.0) {
            bail!("lr_decay factor must be > 0");
        }
        self.accumulation_schedule.validate()?;
        if self.early_stop_patience == 0 || self.validate_every == 0 {
            bail!("early_stop_patience and validate_every must be >= 1");
        }
        if self.n_folds < 2 {
            bail!("n_folds must be >= 2");
        }
        if self.top_k == 0 {
            bail!("top_k must be >= 1");
        }
        if !(self.rcnn_pad >= 0.0) || !(self.target_sigma >= 0.0) {
            bail!("rcnn_pad and target_sigma must be >= 0");
        }
        if self.region.target_height == 0 {
            bail!("region.target_height must be >= 1");
        }
        self.model.validate()?;
        self.detector.validate()?;
        self.augmentation.validate()?;
        Ok(())
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data
            .root
            .as_deref()
            .context("no dataset root: set data.root, --data-root or CEPHALO_DATA_ROOT")
    }

    pub fn annotation_path(&self) -> Result<PathBuf> {
        Ok(if self.data.annotations.is_absolute() {
            self.data.annotations.clone()
        } else {
            self.data_root()?.join(&self.data.annotations)
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.data
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn dataset_options(&self) -> cephalo_core::dataset::DatasetOptions {
        cephalo_core::dataset::DatasetOptions {
            image_ext: self.data.image_ext.clone(),
            ruler_length_mm: self.data.ruler_length_mm,
        }
    }
}
