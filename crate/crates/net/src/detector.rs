//! Single-class anchor detector for the face region: a ConvNeXt V2 backbone
//! at stride 32, a shared 3x3 conv, and per-anchor objectness and box
//! regression. Trained with sampled binary cross-entropy and smooth L1.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use cephalo_core::geometry::BoundingBox;
use cephalo_core::imageops::resize_scaled;
use cephalo_core::region::{Detection, RegionDetector};
use cephalo_core::Scalar;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convnext::{ConvNeXtV2, EncoderSize};
use crate::error::{Error, Result};
use crate::layers::{Conv1x1, Conv3x3, Mode};
use crate::params::{read_checkpoint, ParamStore};
use crate::train::{adamw, GradAccumulator};

const FEATURE_STRIDE: usize = 32;
/// Upper bound on predicted log size changes, as in common detector code.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Anchor side lengths in resized-input pixels.
    pub anchor_sizes: Vec<f64>,
    /// Anchor height / width ratios.
    pub aspect_ratios: Vec<f64>,
    pub backbone_id: String,
    pub score_threshold: f64,
    /// Images are resized to this height before detection.
    pub input_height: usize,
    pub head_channels: usize,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub samples_per_image: usize,
    pub positive_fraction: f64,
    pub nms_iou: f64,
    pub pre_nms_top_n: usize,
    pub max_detections: usize,
    pub pretrained_weights_ref: String,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            anchor_sizes: vec![128.0, 256.0, 320.0, 512.0],
            aspect_ratios: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75],
            backbone_id: "convnextv2_atto".into(),
            score_threshold: 0.05,
            input_height: 800,
            head_channels: 256,
            fg_iou: 0.7,
            bg_iou: 0.3,
            samples_per_image: 256,
            positive_fraction: 0.5,
            nms_iou: 0.7,
            pre_nms_top_n: 1000,
            max_detections: 10,
            pretrained_weights_ref: "none".into(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_sizes.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config(
                "anchor sizes and aspect ratios must be non-empty".into(),
            ));
        }
        if self
            .anchor_sizes
            .iter()
            .chain(&self.aspect_ratios)
            .any(|v| !(*v > 0.0))
        {
            return Err(Error::Config(
                "anchor sizes and aspect ratios must be positive".into(),
            ));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "score_threshold {} outside (0, 1)",
                self.score_threshold
            )));
        }
        if self.input_height < FEATURE_STRIDE || !(self.bg_iou <= self.fg_iou) {
            return Err(Error::Config(
                "input_height must be >= 32 and bg_iou <= fg_iou".into(),
            ));
        }
        self.backbone_id.parse::<EncoderSize>()?;
        Ok(())
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchor_sizes.len() * self.aspect_ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

/// One training image and its ground-truth face box (original pixels).
pub struct DetectorSample<'a> {
    pub image: &'a Array2<f32>,
    pub gt: BoundingBox<f64>,
}

type Boxf = [f64; 4];

fn iou(a: &Boxf, b: &Boxf) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Anchors for an `fh x fw` feature map, ordered `(row, col, size, ratio)`.
pub fn anchors(config: &DetectorConfig, fh: usize, fw: usize) -> Vec<Boxf> {
    let mut base = Vec::new();
    for &s in &config.anchor_sizes {
        for &r in &config.aspect_ratios {
            let hr = r.sqrt();
            base.push((s / hr / 2.0, s * hr / 2.0));
        }
    }
    let mut out = Vec::with_capacity(fh * fw * base.len());
    for i in 0..fh {
        for j in 0..fw {
            let (cx, cy) = (
                (j as f64 + 0.5) * FEATURE_STRIDE as f64,
                (i as f64 + 0.5) * FEATURE_STRIDE as f64,
            );
            for &(hw, hh) in &base {
                out.push([cx - hw, cy - hh, cx + hw, cy + hh]);
            }
        }
    }
    out
}

pub fn encode_box(anchor: &Boxf, gt: &Boxf) -> [f64; 4] {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + aw / 2.0, anchor[1] + ah / 2.0);
    let (gw, gh) = (gt[2] - gt[0], gt[3] - gt[1]);
    let (gx, gy) = (gt[0] + gw / 2.0, gt[1] + gh / 2.0);
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]
}

pub fn decode_box(anchor: &Boxf, d: &[f64; 4]) -> Boxf {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + aw / 2.0, anchor[1] + ah / 2.0);
    let (cx, cy) = (ax + d[0] * aw, ay + d[1] * ah);
    let (w, h) = (
        aw * d[2].min(MAX_LOG_SCALE).exp(),
        ah * d[3].min(MAX_LOG_SCALE).exp(),
    );
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Greedy non-maximum suppression; returns kept indices by descending score.
pub fn nms(boxes: &[Boxf], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

/// Anchor labels: 1 foreground, 0 background, -1 ignored. The best anchor
/// for the ground truth is always foreground.
pub fn label_anchors(anchors: &[Boxf], gt: &Boxf, fg_iou: f64, bg_iou: f64) -> Vec<i8> {
    let ious: Vec<f64> = anchors.iter().map(|a| iou(a, gt)).collect();
    let best = ious.iter().cloned().fold(0.0, f64::max);
    ious.iter()
        .map(|&v| {
            if v >= fg_iou || (best > 0.0 && v == best) {
                1
            } else if v < bg_iou {
                0
            } else {
                -1
            }
        })
        .collect()
}

struct Prepared {
    input: Tensor,
    scale: f64,
    size: (usize, usize),
}

pub struct AnchorDetector {
    config: DetectorConfig,
    params: ParamStore,
    backbone: ConvNeXtV2,
    conv: Conv3x3,
    cls: Conv1x1,
    reg: Conv1x1,
}

impl AnchorDetector {
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let size: EncoderSize = config.backbone_id.parse()?;
        let mut ps = ParamStore::new(DType::F32, seed);
        let backbone = ConvNeXtV2::new(&mut ps, "backbone.", size, 1, 0.0)?;
        let c = size.dims()[3];
        let a = config.anchors_per_location();
        let conv = Conv3x3::new(&mut ps, "head.conv", c, config.head_channels, true)?;
        let cls = Conv1x1::new(&mut ps, "head.cls", config.head_channels, a, true)?;
        let reg = Conv1x1::new(&mut ps, "head.reg", config.head_channels, 4 * a, true)?;
        let det = Self {
            config: config.clone(),
            params: ps,
            backbone,
            conv,
            cls,
            reg,
        };
        if let Some(path) = crate::model::resolve_weights(&config.pretrained_weights_ref)? {
            det.load_pretrained_backbone(&path)?;
        }
        Ok(det)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn load_pretrained_backbone(&self, path: &Path) -> Result<()> {
        let mut state = crate::convnext::read_pretrained(path)?;
        let stem = "downsample_layers.0.0.weight";
        if let Some(w) = state.get(stem) {
            if w.dim(1)? == 3 {
                let adapted = crate::convnext::adapt_input_to_single_channel(w)?;
                state.insert(stem.to_string(), adapted);
            }
        }
        let prefixed: HashMap<String, Tensor> = state
            .into_iter()
            .map(|(k, v)| (format!("backbone.{k}"), v))
            .collect();
        self.params.load_from(&prefixed, false)?;
        Ok(())
    }

    fn prepare(&self, image: &Array2<f32>) -> Result<Prepared> {
        let (h, w) = image.dim();
        let (rh, rw, scale) = cephalo_core::geometry::resized_dims(h, w, self.config.input_height)?;
        let resized = if scale == 1.0 {
            image.clone()
        } else {
            resize_scaled(image, rh, rw, scale)
        };
        let (hp, wp) = (
            rh.div_ceil(FEATURE_STRIDE) * FEATURE_STRIDE,
            rw.div_ceil(FEATURE_STRIDE) * FEATURE_STRIDE,
        );
        let data: Vec<f32> = resized
            .iter()
            .map(|v| (v / 255.0 - crate::model::INPUT_MEAN as f32) / crate::model::INPUT_STD as f32)
            .collect();
        let x = Tensor::from_vec(data, (1, rh, rw, 1), &Device::Cpu)?
            .pad_with_zeros(1, 0, hp - rh)?
            .pad_with_zeros(2, 0, wp - rw)?;
        Ok(Prepared {
            input: x,
            scale,
            size: (rh, rw),
        })
    }

    /// Objectness logits `(N,)` and deltas `(N, 4)` plus the feature size.
    fn heads(&self, x: &Tensor, mode: &mut Mode) -> Result<(Tensor, Tensor, (usize, usize))> {
        let feats = self.backbone.forward(x, mode)?;
        let f = feats.last().expect("four stages");
        let (_, fh, fw, _) = f.dims4()?;
        let t = self.conv.forward(f)?.relu()?;
        let a = self.config.anchors_per_location();
        let cls = self.cls.forward(&t)?.reshape(fh * fw * a)?;
        let reg = self.reg.forward(&t)?.reshape((fh * fw * a, 4))?;
        Ok((cls, reg, (fh, fw)))
    }

    /// Scored boxes in original-image pixels, best first, after NMS.
    pub fn detect_plane(&self, image: &Array2<f32>) -> Result<Vec<Detection<f64>>> {
        let p = self.prepare(image)?;
        let (cls, reg, (fh, fw)) = self.heads(&p.input, &mut Mode::Eval)?;
        let logits: Vec<f32> = cls.to_vec1()?;
        let deltas: Vec<Vec<f32>> = reg.to_vec2()?;
        let anchors = anchors(&self.config, fh, fw);
        let (rh, rw) = p.size;
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(self.config.pre_nms_top_n);
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for i in order {
            let d = [
                deltas[i][0] as f64,
                deltas[i][1] as f64,
                deltas[i][2] as f64,
                deltas[i][3] as f64,
            ];
            let b = decode_box(&anchors[i], &d);
            let b = [
                b[0].clamp(0.0, rw as f64),
                b[1].clamp(0.0, rh as f64),
                b[2].clamp(0.0, rw as f64),
                b[3].clamp(0.0, rh as f64),
            ];
            if b[2] - b[0] < 1.0 || b[3] - b[1] < 1.0 {
                continue;
            }
            boxes.push(b);
            scores.push(1.0 / (1.0 + (-(logits[i] as f64)).exp()));
        }
        let keep = nms(&boxes, &scores, self.config.nms_iou);
        let (h, w) = image.dim();
        let mut out = Vec::new();
        for i in keep.into_iter().take(self.config.max_detections) {
            let b = boxes[i].map(|v| v / p.scale);
            let bbox = BoundingBox::new(b[0], b[1], b[2].min(w as f64), b[3].min(h as f64))?;
            out.push(Detection {
                bbox,
                score: scores[i],
            });
        }
        Ok(out)
    }

    /// Sampled BCE objectness loss plus smooth-L1 box loss for one image.
    fn loss(&self, sample: &DetectorSample, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let p = self.prepare(sample.image)?;
        let (cls, reg, (fh, fw)) = self.heads(&p.input, &mut Mode::Train(rng))?;
        let anchors = anchors(&self.config, fh, fw);
        let g = &sample.gt;
        let gt = [
            g.x0 * p.scale,
            g.y0 * p.scale,
            g.x1 * p.scale,
            g.y1 * p.scale,
        ];
        let labels = label_anchors(&anchors, &gt, self.config.fg_iou, self.config.bg_iou);
        let mut pos: Vec<u32> = (0..labels.len())
            .filter(|&i| labels[i] == 1)
            .map(|i| i as u32)
            .collect();
        let mut neg: Vec<u32> = (0..labels.len())
            .filter(|&i| labels[i] == 0)
            .map(|i| i as u32)
            .collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        let n_pos = pos
            .len()
            .min((self.config.samples_per_image as f64 * self.config.positive_fraction) as usize)
            .max(1.min(pos.len()));
        pos.truncate(n_pos);
        neg.truncate(self.config.samples_per_image.saturating_sub(n_pos));
        let n = (pos.len() + neg.len()).max(1) as f64;

        let dev = Device::Cpu;
        let sampled: Vec<u32> = pos.iter().chain(&neg).copied().collect();
        let targets: Vec<f32> = pos
            .iter()
            .map(|_| 1.0)
            .chain(neg.iter().map(|_| 0.0))
            .collect();
        let z = cls.index_select(&Tensor::new(sampled.as_slice(), &dev)?, 0)?;
        let y = Tensor::new(targets.as_slice(), &dev)?;
        // softplus(z) - y z, written stably
        let softplus = (z.relu()? + (z.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
        let bce = (softplus - (&y * &z)?)?.sum_all()?;

        let box_loss = if pos.is_empty() {
            Tensor::zeros((), DType::F32, &dev)?
        } else {
            let pred = reg.index_select(&Tensor::new(pos.as_slice(), &dev)?, 0)?;
            let tgt: Vec<f32> = pos
                .iter()
                .flat_map(|&i| encode_box(&anchors[i as usize], &gt).map(|v| v as f32))
                .collect();
            let tgt = Tensor::from_vec(tgt, (pos.len(), 4), &dev)?;
            let beta = 1.0 / 9.0;
            let ad = (pred - tgt)?.abs()?;
            let m = ad.minimum(beta)?;
            ((m.sqr()? * (0.5 / beta))? + (ad - m)?)?.sum_all()?
        };
        Ok(((bce + box_loss)? / n)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = HashMap::from([(
            "detector_config".to_string(),
            serde_json::to_string(&self.config)?,
        )]);
        self.params.save(path, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = read_checkpoint(path)?;
        let config: DetectorConfig =
            serde_json::from_str(meta.get("detector_config").ok_or_else(|| {
                Error::Metadata(format!("{}: no detector_config", path.display()))
            })?)?;
        let det = Self::new(
            &DetectorConfig {
                pretrained_weights_ref: "none".into(),
                ..config.clone()
            },
            0,
        )?;
        det.params.load_from(&tensors, true)?;
        Ok(Self { config, ..det })
    }
}

/// Trains a fresh detector. Zero epochs returns the initialized model.
pub fn train_detector(
    samples: &[DetectorSample],
    config: &DetectorConfig,
    train: &DetectorTrainConfig,
) -> Result<AnchorDetector> {
    if samples.is_empty() {
        return Err(cephalo_core::Error::Empty("detector training set").into());
    }
    let det = AnchorDetector::new(config, train.seed)?;
    if train.epochs == 0 {
        return Ok(det);
    }
    let vars = det.params.vars();
    let mut opt = adamw(vars.clone(), train.lr, train.weight_decay)?;
    let mut acc = GradAccumulator::new(vars);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let loss = det.loss(&samples[i], &mut rng)?;
            let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("detector loss at epoch {epoch}")));
            }
            total += v;
            acc.accumulate(&loss)?;
            acc.step(&mut opt)?;
        }
        log::info!(
            "detector epoch {epoch}: mean loss {:.4}",
            total / samples.len() as f64
        );
    }
    Ok(det)
}

impl<T: Scalar> RegionDetector<T> for AnchorDetector {
    fn detect(&self, image: &Array2<T>) -> cephalo_core::Result<Vec<Detection<T>>> {
        let plane = image.mapv(|v| v.to_f64_lossy() as f32);
        let dets = self
            .detect_plane(&plane)
            .map_err(|e| cephalo_core::Error::Detector(e.to_string()))?;
        dets.into_iter()
            .map(|d| {
                Ok(Detection {
                    bbox: BoundingBox::new(
                        T::c(d.bbox.x0),
                        T::c(d.bbox.y0),
                        T::c(d.bbox.x1),
                        T::c(d.bbox.y1),
                    )?,
                    score: T::c(d.score),
                })
            })
            .collect()
    }
}
