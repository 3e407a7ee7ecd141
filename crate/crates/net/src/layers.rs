//! Channels-last building blocks. Tensors flow as `(B, H, W, C)`; weights keep
//! the reference `(out, in, kh, kw)` layout so checkpoints load unchanged.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops;
use crate::params::{Init, ParamStore};

/// Stochastic layers are active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Eval drops the autograd graph here so intermediates are freed early.
    pub fn cut(&self, x: Tensor) -> Tensor {
        if self.is_train() {
            x
        } else {
            x.detach()
        }
    }
}

const INIT_STD: f64 = 0.02;

fn weight(ps: &mut ParamStore, name: &str, shape: &[usize]) -> Result<Tensor> {
    ps.param(
        &format!("{name}.weight"),
        shape,
        Init::TruncNormal { std: INIT_STD },
    )
}

fn bias(ps: &mut ParamStore, name: &str, n: usize) -> Result<Tensor> {
    ps.param(&format!("{name}.bias"), &[n], Init::Zeros)
}

/// Per-sample keep mask of shape `(B, 1, .., 1)` scaled by `1 / (1 - p)`,
/// or `None` when the layer is inactive.
fn keep_mask(mode: &mut Mode, p: f64, shape: &[usize], dtype: DType) -> Result<Option<Tensor>> {
    let Mode::Train(rng) = mode else {
        return Ok(None);
    };
    if p <= 0.0 {
        return Ok(None);
    }
    let n: usize = shape.iter().product();
    let scale = 1.0 / (1.0 - p);
    let v: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect();
    Ok(Some(
        Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?,
    ))
}

/// Drops whole residual branches per sample.
pub fn drop_path(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    let mut shape = vec![1; x.rank()];
    shape[0] = x.dim(0)?;
    match keep_mask(mode, p, &shape, x.dtype())? {
        Some(m) => Ok(x.broadcast_mul(&m)?),
        None => Ok(x.clone()),
    }
}

/// Drops whole channels per sample (channels-last).
pub fn dropout2d(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    let (b, _, _, c) = x.dims4()?;
    match keep_mask(mode, p, &[b, 1, 1, c], x.dtype())? {
        Some(m) => Ok(x.broadcast_mul(&m)?),
        None => Ok(x.clone()),
    }
}

fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let k = *dims.last().unwrap_or(&1);
    let rows = x.elem_count() / k.max(1);
    let y = x.contiguous()?.reshape((rows, k))?.matmul(w)?;
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(1)?;
    Ok(y.reshape(out)?)
}

/// Dense layer over the last axis; weight `(out, in)`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
    ) -> Result<Self> {
        Ok(Self {
            weight: weight(ps, name, &[d_out, d_in])?,
            bias: if with_bias {
                Some(bias(ps, name, d_out)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(ops::bias_add(&y, b)?),
            None => Ok(y),
        }
    }
}

/// `k x k` convolution with stride `k` (stem and downsampling layers).
pub struct PatchConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub k: usize,
}

impl PatchConv {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: weight(ps, name, &[d_out, d_in, k, k])?,
            bias: bias(ps, name, d_out)?,
            k,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (d_out, d_in, k, _) = self.weight.dims4()?;
        let w = self
            .weight
            .permute((2, 3, 1, 0))?
            .reshape((k * k * d_in, d_out))?;
        let cols = ops::space_to_depth(x, k)?;
        Ok(ops::bias_add(&matmul_last(&cols, &w)?, &self.bias)?)
    }
}

/// `3 x 3` convolution, stride 1, same padding.
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv3x3 {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
    ) -> Result<Self> {
        Ok(Self {
            weight: weight(ps, name, &[d_out, d_in, 3, 3])?,
            bias: if with_bias {
                Some(bias(ps, name, d_out)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (d_out, d_in, _, _) = self.weight.dims4()?;
        let taps = self
            .weight
            .permute((2, 3, 1, 0))?
            .reshape((9, d_in, d_out))?;
        let y = ops::conv3x3(x, &taps)?;
        match &self.bias {
            Some(b) => Ok(ops::bias_add(&y, b)?),
            None => Ok(y),
        }
    }
}

/// `1 x 1` convolution; weight `(out, in, 1, 1)`.
pub struct Conv1x1 {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv1x1 {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
    ) -> Result<Self> {
        Ok(Self {
            weight: weight(ps, name, &[d_out, d_in, 1, 1])?,
            bias: if with_bias {
                Some(bias(ps, name, d_out)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (d_out, d_in, _, _) = self.weight.dims4()?;
        let y = matmul_last(x, &self.weight.reshape((d_out, d_in))?.t()?)?;
        match &self.bias {
            Some(b) => Ok(ops::bias_add(&y, b)?),
            None => Ok(y),
        }
    }
}

/// `2 x 2` stride-2 transposed convolution; weight `(in, out, 2, 2)`.
pub struct ConvTranspose2x2 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvTranspose2x2 {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: weight(ps, name, &[d_in, d_out, 2, 2])?,
            bias: bias(ps, name, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (d_in, d_out, _, _) = self.weight.dims4()?;
        let w = self
            .weight
            .permute((0, 2, 3, 1))?
            .reshape((d_in, 4 * d_out))?;
        let y = ops::depth_to_space(&matmul_last(x, &w)?, 2)?;
        Ok(ops::bias_add(&y, &self.bias)?)
    }
}

/// LayerNorm over channels.
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: bias(ps, name, dim)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::layer_norm(x, &self.weight, &self.bias, self.eps)?)
    }
}

/// GroupNorm with 32 groups, or one per channel below 32 channels.
pub struct GroupNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub groups: usize,
    pub eps: f64,
}

pub fn group_count(channels: usize) -> usize {
    if channels < 32 {
        channels
    } else {
        32
    }
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let groups = group_count(dim);
        if !dim.is_multiple_of(groups) {
            return Err(crate::Error::Config(format!(
                "{name}: {dim} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: bias(ps, name, dim)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::group_norm(
            x,
            &self.weight,
            &self.bias,
            self.groups,
            self.eps,
        )?)
    }
}

/// Global response normalization; parameters `(1, 1, 1, C)`.
pub struct Grn {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Grn {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[1, 1, 1, dim], Init::Zeros)?,
            beta: ps.param(&format!("{name}.beta"), &[1, 1, 1, dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(3)?;
        Ok(ops::grn(
            x,
            &self.gamma.reshape(c)?,
            &self.beta.reshape(c)?,
        )?)
    }
}

/// ConvNeXt V2 block: depthwise 7x7, LayerNorm, MLP with GELU and GRN,
/// residual with drop path.
pub struct ConvNeXtBlock {
    pub dwconv_weight: Tensor,
    pub dwconv_bias: Tensor,
    pub norm: LayerNorm,
    pub pwconv1: Linear,
    pub grn: Grn,
    pub pwconv2: Linear,
    pub drop_path: f64,
}

impl ConvNeXtBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, drop_path: f64) -> Result<Self> {
        Ok(Self {
            dwconv_weight: weight(ps, &format!("{name}.dwconv"), &[dim, 1, 7, 7])?,
            dwconv_bias: bias(ps, &format!("{name}.dwconv"), dim)?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim)?,
            pwconv1: Linear::new(ps, &format!("{name}.pwconv1"), dim, 4 * dim, true)?,
            grn: Grn::new(ps, &format!("{name}.grn"), 4 * dim)?,
            pwconv2: Linear::new(ps, &format!("{name}.pwconv2"), 4 * dim, dim, true)?,
            drop_path,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let y = ops::bias_add(
            &ops::depthwise_conv(x, &self.dwconv_weight)?,
            &self.dwconv_bias,
        )?;
        let y = self.norm.forward(&y)?;
        let y = ops::gelu(&self.pwconv1.forward(&y)?)?;
        let y = self.grn.forward(&y)?;
        let y = self.pwconv2.forward(&y)?;
        let out = (x + drop_path(&y, self.drop_path, mode)?)?;
        Ok(mode.cut(out))
    }
}
