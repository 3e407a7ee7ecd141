//! ConvNeXt V2 feature hierarchy (no classification head).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvNeXtBlock, LayerNorm, Mode, PatchConv};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSize {
    Atto,
    Nano,
    Tiny,
}

impl EncoderSize {
    pub fn dims(self) -> [usize; 4] {
        match self {
            EncoderSize::Atto => [40, 80, 160, 320],
            EncoderSize::Nano => [80, 160, 320, 640],
            EncoderSize::Tiny => [96, 192, 384, 768],
        }
    }

    pub fn depths(self) -> [usize; 4] {
        match self {
            EncoderSize::Atto => [2, 2, 6, 2],
            EncoderSize::Nano => [2, 2, 8, 2],
            EncoderSize::Tiny => [3, 3, 9, 3],
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            EncoderSize::Atto => "convnextv2_atto",
            EncoderSize::Nano => "convnextv2_nano",
            EncoderSize::Tiny => "convnextv2_tiny",
        }
    }
}

impl std::str::FromStr for EncoderSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s
            .trim()
            .to_ascii_lowercase()
            .trim_start_matches("convnextv2_")
        {
            "atto" => Ok(EncoderSize::Atto),
            "nano" => Ok(EncoderSize::Nano),
            "tiny" => Ok(EncoderSize::Tiny),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

pub struct ConvNeXtV2 {
    pub stem: PatchConv,
    pub stem_norm: LayerNorm,
    /// `(norm, conv)` for stages 1..4.
    pub downsample: Vec<(LayerNorm, PatchConv)>,
    pub stages: Vec<Vec<ConvNeXtBlock>>,
}

impl ConvNeXtV2 {
    /// Registers parameters under `prefix` (e.g. `"encoder."`). Drop path
    /// rates rise linearly from 0 to `drop_path` over all blocks.
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        size: EncoderSize,
        in_chans: usize,
        drop_path: f64,
    ) -> Result<Self> {
        let dims = size.dims();
        let depths = size.depths();
        let total: usize = depths.iter().sum();
        let rate = |i: usize| {
            if total > 1 {
                drop_path * i as f64 / (total - 1) as f64
            } else {
                0.0
            }
        };
        let stem = PatchConv::new(
            ps,
            &format!("{prefix}downsample_layers.0.0"),
            in_chans,
            dims[0],
            4,
        )?;
        let stem_norm = LayerNorm::new(ps, &format!("{prefix}downsample_layers.0.1"), dims[0])?;
        let mut downsample = Vec::new();
        for i in 1..4 {
            downsample.push((
                LayerNorm::new(ps, &format!("{prefix}downsample_layers.{i}.0"), dims[i - 1])?,
                PatchConv::new(
                    ps,
                    &format!("{prefix}downsample_layers.{i}.1"),
                    dims[i - 1],
                    dims[i],
                    2,
                )?,
            ));
        }
        let mut stages = Vec::new();
        let mut cursor = 0;
        for (i, (&dim, &depth)) in dims.iter().zip(&depths).enumerate() {
            let mut blocks = Vec::new();
            for j in 0..depth {
                blocks.push(ConvNeXtBlock::new(
                    ps,
                    &format!("{prefix}stages.{i}.{j}"),
                    dim,
                    rate(cursor),
                )?);
                cursor += 1;
            }
            stages.push(blocks);
        }
        Ok(Self {
            stem,
            stem_norm,
            downsample,
            stages,
        })
    }

    /// Channels-last input `(B, H, W, C)` with `H`, `W` divisible by 32.
    /// Returns the four stage outputs at strides 4, 8, 16 and 32.
    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Vec<Tensor>> {
        let mut x = mode.cut(self.stem_norm.forward(&self.stem.forward(x)?)?);
        let mut feats = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                let (norm, conv) = &self.downsample[i - 1];
                x = mode.cut(conv.forward(&norm.forward(&x)?)?);
            }
            for block in blocks {
                x = block.forward(&x, mode)?;
            }
            feats.push(x.clone());
        }
        Ok(feats)
    }
}

/// Sums a `(O, 3, k, k)` stem weight over its input channels, giving the
/// `(O, 1, k, k)` weight for grayscale input.
pub fn adapt_input_to_single_channel(stem_weight: &Tensor) -> Result<Tensor> {
    match stem_weight.dims() {
        &[_, 3, _, _] => Ok(stem_weight.sum_keepdim(1)?),
        d => Err(Error::WeightShape {
            name: "stem".into(),
            expected: vec![d.first().copied().unwrap_or(0), 3, 4, 4],
            found: d.to_vec(),
        }),
    }
}

/// Converts a pretrained state dict to dense encoder names: strips
/// `encoder.`/`model.` prefixes, rewrites sparse-convolution `kernel`
/// tensors to `(out, in, k, k)` weights, drops `ln`/`linear` wrappers and
/// reshapes GRN parameters to `(1, 1, 1, C)`.
pub fn remap_pretrained(state: HashMap<String, Tensor>) -> Result<HashMap<String, Tensor>> {
    let mut out = HashMap::new();
    for (key, v) in state {
        let key = key
            .strip_prefix("encoder.")
            .or_else(|| key.strip_prefix("model."))
            .unwrap_or(&key)
            .to_string();
        if let Some(base) = key.strip_suffix(".kernel") {
            let new_key = format!("{base}.weight");
            let w = match *v.dims() {
                [kv, d_in, d_out] => {
                    let ks = (kv as f64).sqrt().round() as usize;
                    v.permute((2, 1, 0))?
                        .reshape((d_out, d_in, ks, ks))?
                        .transpose(2, 3)?
                        .contiguous()?
                }
                [kv, dim] => {
                    let ks = (kv as f64).sqrt().round() as usize;
                    v.t()?
                        .reshape((dim, 1, ks, ks))?
                        .transpose(2, 3)?
                        .contiguous()?
                }
                _ => v,
            };
            out.insert(new_key, w);
            continue;
        }
        let mut parts: Vec<&str> = key.split('.').collect();
        if parts.len() >= 2 && matches!(parts[parts.len() - 2], "ln" | "linear") {
            parts.remove(parts.len() - 2);
        }
        let new_key = parts.join(".");
        let v = if new_key.ends_with("bias") && v.rank() != 1 {
            v.flatten_all()?
        } else if new_key.contains("grn") && v.rank() != 4 {
            let n = v.elem_count();
            v.reshape((1, 1, 1, n))?
        } else {
            v
        };
        out.insert(new_key, v);
    }
    Ok(out)
}

/// Reads a pretrained encoder state dict from `.safetensors` or a PyTorch
/// `.pt`/`.pth` file (optionally nested under a `model` key).
pub fn read_pretrained(path: &Path) -> Result<HashMap<String, Tensor>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default();
    let state: HashMap<String, Tensor> = if ext == "safetensors" {
        candle_core::safetensors::load(path, &Device::Cpu)?
    } else {
        let nested = candle_core::pickle::read_all_with_key(path, Some("model"))?;
        let entries = if nested.is_empty() {
            candle_core::pickle::read_all(path)?
        } else {
            nested
        };
        entries.into_iter().collect()
    };
    remap_pretrained(state)
}
