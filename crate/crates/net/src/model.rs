//! Heatmap network: ConvNeXt V2 encoder, MLP feature pyramid fused at
//! stride 4, two learned up blocks and a per-landmark head.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::convnext::{adapt_input_to_single_channel, read_pretrained, ConvNeXtV2, EncoderSize};
use crate::error::{Error, Result};
use crate::layers::{
    dropout2d, Conv1x1, Conv3x3, ConvNeXtBlock, ConvTranspose2x2, GroupNorm, Linear, Mode,
};
use crate::ops;
use crate::params::{read_checkpoint, ParamStore};

/// Intensity normalization applied inside [`LandmarkModel::forward`].
pub const INPUT_MEAN: f64 = 0.449;
pub const INPUT_STD: f64 = 0.226;
/// Spatial dims are padded to a multiple of the encoder stride.
pub const STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Nano,
    Tiny,
}

impl Variant {
    pub fn encoder(self) -> EncoderSize {
        match self {
            Variant::Nano => EncoderSize::Nano,
            Variant::Tiny => EncoderSize::Tiny,
        }
    }

    pub fn pyramid_width(self) -> usize {
        match self {
            Variant::Nano => 128,
            Variant::Tiny => 192,
        }
    }

    /// Output widths of the two up blocks.
    pub fn decoder_widths(self) -> [usize; 2] {
        match self {
            Variant::Nano => [64, 32],
            Variant::Tiny => [96, 64],
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nano" => Ok(Variant::Nano),
            "tiny" => Ok(Variant::Tiny),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Nano => "nano",
            Variant::Tiny => "tiny",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub variant: Variant,
    pub n_landmarks: usize,
    pub encoder_drop_path: f64,
    pub decoder_drop_path: f64,
    pub residual_dropout2d: f64,
    /// Local file, a name resolved under `$CEPHALO_WEIGHTS`, or `none` for
    /// random initialization.
    pub pretrained_weights_ref: String,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::new(Variant::Nano)
    }
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            n_landmarks: cephalo_core::N_LANDMARKS,
            encoder_drop_path: 0.375,
            decoder_drop_path: 0.275,
            residual_dropout2d: 0.2,
            pretrained_weights_ref: format!("convnextv2_{variant}_1k_224_fcmae"),
        }
    }

    /// Random init, all stochastic layers off.
    pub fn deterministic(variant: Variant) -> Self {
        Self {
            encoder_drop_path: 0.0,
            decoder_drop_path: 0.0,
            residual_dropout2d: 0.0,
            pretrained_weights_ref: "none".into(),
            ..Self::new(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_landmarks == 0 {
            return Err(Error::Config("n_landmarks must be >= 1".into()));
        }
        for (name, r) in [
            ("encoder_drop_path", self.encoder_drop_path),
            ("decoder_drop_path", self.decoder_drop_path),
            ("residual_dropout2d", self.residual_dropout2d),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Finds pretrained weights for `reference`: `none`/empty gives `None`.
pub fn resolve_weights(reference: &str) -> Result<Option<PathBuf>> {
    let r = reference.trim();
    if r.is_empty() || r.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let direct = PathBuf::from(r);
    if direct.is_file() {
        return Ok(Some(direct));
    }
    if let Some(dir) = std::env::var_os("CEPHALO_WEIGHTS") {
        for ext in ["safetensors", "pt", "pth"] {
            let p = Path::new(&dir).join(format!("{r}.{ext}"));
            if p.is_file() {
                return Ok(Some(p));
            }
        }
    }
    Err(Error::Config(format!(
        "pretrained weights '{r}' not found; pass a file path, place it under $CEPHALO_WEIGHTS, or use 'none'"
    )))
}

struct ResConvBlock {
    conv1: Conv3x3,
    norm1: GroupNorm,
    conv2: Conv3x3,
    norm2: GroupNorm,
    shortcut: Option<Conv1x1>,
    dropout: f64,
}

impl ResConvBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv3x3::new(ps, &format!("{name}.conv1"), d_in, d_out, false)?,
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), d_out)?,
            conv2: Conv3x3::new(ps, &format!("{name}.conv2"), d_out, d_out, false)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), d_out)?,
            shortcut: if d_in != d_out {
                Some(Conv1x1::new(
                    ps,
                    &format!("{name}.shortcut"),
                    d_in,
                    d_out,
                    false,
                )?)
            } else {
                None
            },
            dropout,
        })
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let h = ops::gelu(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let h = dropout2d(&h, self.dropout, mode)?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok(mode.cut(ops::gelu(&(h + s)?)?))
    }
}

struct UpBlock {
    res: ResConvBlock,
    blocks: Vec<ConvNeXtBlock>,
    up: ConvTranspose2x2,
}

impl UpBlock {
    fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let mut x = self.res.forward(x, mode)?;
        for b in &self.blocks {
            x = b.forward(&x, mode)?;
        }
        Ok(mode.cut(self.up.forward(&x)?))
    }
}

pub struct LandmarkModel {
    spec: ModelSpec,
    params: ParamStore,
    encoder: ConvNeXtV2,
    pyramid: Vec<Linear>,
    up: Vec<UpBlock>,
    head_norm: GroupNorm,
    head: Conv1x1,
}

/// Builds the network and loads pretrained encoder weights when the spec
/// names them.
pub fn build_model(spec: &ModelSpec, dtype: DType, seed: u64) -> Result<LandmarkModel> {
    let model = LandmarkModel::random(spec, dtype, seed)?;
    if let Some(path) = resolve_weights(&spec.pretrained_weights_ref)? {
        model.load_pretrained_encoder(&path)?;
    }
    Ok(model)
}

impl LandmarkModel {
    /// Randomly initialized network, ignoring `pretrained_weights_ref`.
    pub fn random(spec: &ModelSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !crate::ops::supported_dtype(dtype) {
            return Err(Error::Config(format!("unsupported dtype {dtype:?}")));
        }
        let v = spec.variant;
        let mut ps = ParamStore::new(dtype, seed);
        let encoder = ConvNeXtV2::new(&mut ps, "encoder.", v.encoder(), 1, spec.encoder_drop_path)?;
        let p = v.pyramid_width();
        let pyramid = v
            .encoder()
            .dims()
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(&mut ps, &format!("pyramid.{i}"), d, p, true))
            .collect::<Result<Vec<_>>>()?;
        let mut up = Vec::new();
        let mut d_in = p;
        for (k, &d_out) in v.decoder_widths().iter().enumerate() {
            let name = format!("decoder.{k}");
            up.push(UpBlock {
                res: ResConvBlock::new(
                    &mut ps,
                    &format!("{name}.res"),
                    d_in,
                    d_out,
                    spec.residual_dropout2d,
                )?,
                blocks: (0..2)
                    .map(|j| {
                        ConvNeXtBlock::new(
                            &mut ps,
                            &format!("{name}.blocks.{j}"),
                            d_out,
                            spec.decoder_drop_path,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
                up: ConvTranspose2x2::new(&mut ps, &format!("{name}.up"), d_out, d_out)?,
            });
            d_in = d_out;
        }
        let head_norm = GroupNorm::new(&mut ps, "head.norm", d_in)?;
        let head = Conv1x1::new(&mut ps, "head.conv", d_in, spec.n_landmarks, true)?;
        Ok(Self {
            spec: spec.clone(),
            params: ps,
            encoder,
            pyramid,
            up,
            head_norm,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    /// Loads encoder weights, summing a 3-channel stem into one channel.
    pub fn load_pretrained_encoder(&self, path: &Path) -> Result<usize> {
        let mut state = read_pretrained(path)?;
        let stem = "downsample_layers.0.0.weight";
        if let Some(w) = state.get(stem) {
            if w.dim(1)? == 3 {
                let adapted = adapt_input_to_single_channel(w)?;
                state.insert(stem.to_string(), adapted);
            }
        }
        let prefixed: HashMap<String, Tensor> = state
            .into_iter()
            .map(|(k, v)| (format!("encoder.{k}"), v))
            .collect();
        let loaded = self.params.load_from(&prefixed, false)?;
        let expected = self
            .params
            .names()
            .filter(|n| n.starts_with("encoder."))
            .count();
        if loaded.len() != expected {
            let missing = self
                .params
                .names()
                .find(|n| n.starts_with("encoder.") && !loaded.iter().any(|l| l == n))
                .unwrap_or_default();
            return Err(Error::MissingWeight(missing.to_string()));
        }
        log::info!(
            "loaded {} pretrained encoder tensors from {}",
            loaded.len(),
            path.display()
        );
        Ok(loaded.len())
    }

    /// Raw intensities `(B, 1, H, W)` in `[0, 255]` to logits `(B, L, H, W)`.
    /// Inputs are zero-padded bottom/right to a multiple of 32 after
    /// normalization and the output is cropped back.
    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::Config(format!(
                "expected single-channel input, got {c} channels"
            )));
        }
        let (hp, wp) = (h.div_ceil(STRIDE) * STRIDE, w.div_ceil(STRIDE) * STRIDE);
        let x = x.to_dtype(self.dtype())?.reshape((b, h, w, 1))?;
        let x = ((x / 255.0)? - INPUT_MEAN)? / INPUT_STD;
        let x = x?
            .pad_with_zeros(1, 0, hp - h)?
            .pad_with_zeros(2, 0, wp - w)?;

        let feats = self.encoder.forward(&x, mode)?;
        let (h4, w4) = (hp / 4, wp / 4);
        let mut fused: Option<Tensor> = None;
        for (f, proj) in feats.iter().zip(&self.pyramid) {
            let y = crate::ops::resize_bilinear(&proj.forward(f)?, h4, w4)?;
            fused = Some(match fused {
                Some(acc) => (acc + y)?,
                None => y,
            });
        }
        let mut y = ops::gelu(&fused.expect("four encoder stages"))?;
        for block in &self.up {
            y = block.forward(&y, mode)?;
        }
        let y = ops::gelu(&self.head_norm.forward(&y)?)?;
        // 1x1 head straight into (B, L, H*W)
        let (d_out, d_in, _, _) = self.head.weight.dims4()?;
        let y = y.reshape((b, hp * wp, d_in))?.transpose(1, 2)?;
        let y = self
            .head
            .weight
            .reshape((1, d_out, d_in))?
            .broadcast_matmul(&y)?;
        let y = match &self.head.bias {
            Some(bias) => ops::bias_add_dim1(&y, bias)?,
            None => y,
        };
        let y = y.reshape((b, d_out, hp, wp))?;
        if (hp, wp) == (h, w) {
            Ok(y)
        } else {
            Ok(y.narrow(2, 0, h)?.narrow(3, 0, w)?.contiguous()?)
        }
    }

    /// [`forward`](Self::forward) that rejects non-finite logits.
    pub fn forward_checked(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let y = self.forward(x, mode)?;
        let s = y
            .abs()?
            .sum_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        if !s.is_finite() {
            return Err(Error::NonFinite("heatmap logits".into()));
        }
        Ok(y)
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut m = meta.extra.clone();
        m.insert("model_spec".into(), serde_json::to_string(&self.spec)?);
        m.insert("run_config_hash".into(), meta.run_config_hash.clone());
        m.insert(
            "best_val_mre".into(),
            meta.best_val_mre.map(|v| v.to_string()).unwrap_or_default(),
        );
        m.insert(
            "best_epoch".into(),
            meta.best_epoch.map(|v| v.to_string()).unwrap_or_default(),
        );
        m.insert(
            "fold".into(),
            meta.fold.map(|v| v.to_string()).unwrap_or_default(),
        );
        m.insert("seed".into(), meta.seed.to_string());
        self.params.save(path, m)
    }

    /// Restores a model saved by [`save_checkpoint`](Self::save_checkpoint).
    pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<(Self, CheckpointMeta)> {
        let (tensors, mut m) = read_checkpoint(path)?;
        let spec: ModelSpec = serde_json::from_str(
            &m.remove("model_spec")
                .ok_or_else(|| Error::Metadata(format!("{}: no model_spec", path.display())))?,
        )?;
        let parse = |v: Option<String>| v.filter(|s| !s.is_empty());
        let meta = CheckpointMeta {
            run_config_hash: m.remove("run_config_hash").unwrap_or_default(),
            best_val_mre: parse(m.remove("best_val_mre")).and_then(|s| s.parse().ok()),
            best_epoch: parse(m.remove("best_epoch")).and_then(|s| s.parse().ok()),
            fold: parse(m.remove("fold")).and_then(|s| s.parse().ok()),
            seed: m.remove("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
            extra: m,
        };
        let model = Self::random(&spec, dtype, meta.seed)?;
        model.params.load_from(&tensors, true)?;
        Ok((model, meta))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub run_config_hash: String,
    pub best_val_mre: Option<f64>,
    pub best_epoch: Option<usize>,
    pub fold: Option<usize>,
    pub seed: u64,
    /// Other string entries, e.g. the serialized run config.
    pub extra: HashMap<String, String>,
}

/// Cross-entropy between per-plane softmax and the target, averaged over
/// valid landmarks per sample, then over samples with any valid landmark.
pub fn heatmap_loss(logits: &Tensor, target: &Tensor, valid: &[Vec<bool>]) -> Result<Tensor> {
    let (b, l, h, w) = logits.dims4()?;
    if target.dims() != logits.dims() || valid.len() != b || valid.iter().any(|v| v.len() != l) {
        return Err(cephalo_core::Error::ShapeMismatch(format!(
            "logits {:?}, target {:?}, mask {}x{}",
            logits.dims(),
            target.dims(),
            valid.len(),
            valid.first().map_or(0, Vec::len)
        ))
        .into());
    }
    let active = valid.iter().filter(|v| v.iter().any(|&x| x)).count();
    if active == 0 {
        return Err(cephalo_core::Error::NoValidLandmarks.into());
    }
    let weights: Vec<f64> = valid
        .iter()
        .flat_map(|v| {
            let n = v.iter().filter(|&&x| x).count();
            v.iter()
                .map(move |&x| if x { 1.0 / (n * active) as f64 } else { 0.0 })
        })
        .collect();
    let dt = logits.dtype();
    let weights = Tensor::from_vec(weights, (b, l), logits.device())?.to_dtype(dt)?;
    let z = logits.reshape((b, l, h * w))?;
    let y = target.to_dtype(dt)?.reshape((b, l, h * w))?;
    let per_plane =
        ops::plane_cross_entropy(&z.reshape((b * l, h * w))?, &y.reshape((b * l, h * w))?)?;
    Ok((per_plane * weights.reshape(b * l)?)?.sum_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use ndarray::Array4;

    #[test]
    fn spec_defaults() {
        let s = ModelSpec::new(Variant::Nano);
        assert_eq!(
            (
                s.n_landmarks,
                s.encoder_drop_path,
                s.decoder_drop_path,
                s.residual_dropout2d
            ),
            (53, 0.375, 0.275, 0.2)
        );
        assert!(ModelSpec {
            encoder_drop_path: 1.0,
            ..s.clone()
        }
        .validate()
        .is_err());
        assert!(ModelSpec {
            n_landmarks: 0,
            ..s
        }
        .validate()
        .is_err());
        assert!("small".parse::<Variant>().is_err());
    }

    #[test]
    fn missing_weights_are_reported() {
        let spec = ModelSpec {
            pretrained_weights_ref: "/nonexistent/weights.safetensors".into(),
            ..ModelSpec::deterministic(Variant::Nano)
        };
        assert!(matches!(
            build_model(&spec, DType::F32, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_matches_reference_implementation() {
        let (b, l, h, w) = (2, 3, 4, 5);
        let z: Vec<f64> = (0..b * l * h * w)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
            .collect();
        let mut y = vec![0.0; z.len()];
        for plane in 0..b * l {
            y[plane * h * w + (plane * 7) % (h * w)] = 0.6;
            y[plane * h * w + (plane * 3 + 1) % (h * w)] += 0.4;
        }
        let valid = vec![vec![true, false, true], vec![false, false, true]];
        let za = Array4::from_shape_vec((b, l, h, w), z.clone()).unwrap();
        let ya = Array4::from_shape_vec((b, l, h, w), y.clone()).unwrap();
        let expected = cephalo_core::loss::heatmap_loss(za.view(), ya.view(), &valid).unwrap();
        let zt = Tensor::from_vec(z, (b, l, h, w), &Device::Cpu).unwrap();
        let yt = Tensor::from_vec(y, (b, l, h, w), &Device::Cpu).unwrap();
        let got = heatmap_loss(&zt, &yt, &valid)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(heatmap_loss(&zt, &yt, &[vec![false; 3], vec![false; 3]]).is_err());
    }
}
