//! CPU kernels for the channels-last network. Each differentiable op gets its
//! backward pass from forward-only companion ops.

use candle_core::{
    CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType,
};
use num_traits::Float;

trait Elem: WithDType + Float {
    fn erf(self) -> Self;
}

impl Elem for f32 {
    /// Rational approximation, absolute error below 1.5e-7.
    fn erf(self) -> Self {
        let a = self.abs();
        let t = 1.0 / (1.0 + 0.327_591_1 * a);
        let poly = t
            * (0.254_829_6
                + t * (-0.284_496_74 + t * (1.421_413_8 + t * (-1.453_152_1 + t * 1.061_405_4))));
        (1.0 - poly * (-a * a).exp()).copysign(self)
    }
}

impl Elem for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout, op: &str) -> Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::msg(format!("{op}: input must be contiguous")))?;
    Ok(&s.as_slice::<T>()?[a..b])
}

fn dims4(l: &Layout, op: &str) -> Result<(usize, usize, usize, usize)> {
    l.shape().dims4().map_err(|_| {
        candle_core::Error::msg(format!(
            "{op}: expected a rank-4 (B, H, W, C) tensor, got {:?}",
            l.dims()
        ))
    })
}

macro_rules! dispatch {
    ($s:expr, $op:expr, |$t:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(_) => {
                type $t = f32;
                $body
            }
            CpuStorage::F64(_) => {
                type $t = f64;
                $body
            }
            _ => Err(candle_core::Error::msg(format!(
                "{}: only f32 and f64 are supported",
                $op
            ))),
        }
    };
}

// ---------------------------------------------------------------- depthwise

/// Depthwise `k x k` convolution, stride 1, zero padding `k / 2`.
/// Input `(B, H, W, C)`, weight `(C, 1, k, k)`, no bias.
struct DwConv {
    flip: bool,
}

/// Weight gradient of [`DwConv`]: `(x, grad_out) -> (C, 1, k, k)`.
struct DwConvWeightGrad {
    k: usize,
}

fn dw_kernel_size(wl: &Layout, c: usize) -> Result<usize> {
    match wl.dims() {
        &[wc, 1, k, k2] if wc == c && k == k2 && k % 2 == 1 => Ok(k),
        d => Err(candle_core::Error::msg(format!(
            "depthwise weight {d:?} does not match {c} channels"
        ))),
    }
}

/// Weight `(C, 1, k, k)` transposed to `(k*k, C)`, optionally rotated 180 degrees.
fn taps<T: Elem>(w: &[T], c: usize, k: usize, flip: bool) -> Vec<T> {
    let mut t = vec![T::zero(); k * k * c];
    for ch in 0..c {
        for tap in 0..k * k {
            let src = if flip { k * k - 1 - tap } else { tap };
            t[tap * c + ch] = w[ch * k * k + src];
        }
    }
    t
}

fn dw_forward<T: Elem>(
    x: &[T],
    w: &[T],
    (b, h, wd, c): (usize, usize, usize, usize),
    k: usize,
    flip: bool,
) -> Vec<T> {
    let p = k / 2;
    let t = taps(w, c, k, flip);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                let o = ((bi * h + y) * wd + xx) * c;
                let orow = &mut out[o..o + c];
                for i in 0..k {
                    let sy = y + i;
                    if sy < p || sy - p >= h {
                        continue;
                    }
                    for j in 0..k {
                        let sx = xx + j;
                        if sx < p || sx - p >= wd {
                            continue;
                        }
                        let s = ((bi * h + sy - p) * wd + sx - p) * c;
                        let xrow = &x[s..s + c];
                        let trow = &t[(i * k + j) * c..(i * k + j + 1) * c];
                        for ((o, &xv), &tv) in orow.iter_mut().zip(xrow).zip(trow) {
                            *o += xv * tv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn dw_weight_grad<T: Elem>(
    x: &[T],
    g: &[T],
    (b, h, wd, c): (usize, usize, usize, usize),
    k: usize,
) -> Vec<T> {
    let p = k / 2;
    let mut acc = vec![T::zero(); k * k * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                let o = ((bi * h + y) * wd + xx) * c;
                let grow = &g[o..o + c];
                for i in 0..k {
                    let sy = y + i;
                    if sy < p || sy - p >= h {
                        continue;
                    }
                    for j in 0..k {
                        let sx = xx + j;
                        if sx < p || sx - p >= wd {
                            continue;
                        }
                        let s = ((bi * h + sy - p) * wd + sx - p) * c;
                        let xrow = &x[s..s + c];
                        let arow = &mut acc[(i * k + j) * c..(i * k + j + 1) * c];
                        for ((a, &xv), &gv) in arow.iter_mut().zip(xrow).zip(grow) {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![T::zero(); k * k * c];
    for ch in 0..c {
        for tap in 0..k * k {
            out[ch * k * k + tap] = acc[tap * c + ch];
        }
    }
    out
}

impl CustomOp2 for DwConv {
    fn name(&self) -> &'static str {
        "dwconv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(l1, self.name())?;
        let k = dw_kernel_size(l2, dims.3)?;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let w = contiguous::<T>(s2, l2, self.name())?;
            Ok((
                T::to_cpu_storage_owned(dw_forward(x, w, dims, k, self.flip)),
                l1.shape().clone(),
            ))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        let k = w.dim(2)?;
        let gx = g.apply_op2_no_bwd(w, &DwConv { flip: !self.flip })?;
        let mut gw = x.apply_op2_no_bwd(&g, &DwConvWeightGrad { k })?;
        if self.flip {
            gw = gw.flip(&[2, 3])?;
        }
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DwConvWeightGrad {
    fn name(&self) -> &'static str {
        "dwconv-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(l1, self.name())?;
        if l1.dims() != l2.dims() {
            candle_core::bail!(
                "{}: shape mismatch {:?} vs {:?}",
                self.name(),
                l1.dims(),
                l2.dims()
            );
        }
        let k = self.k;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let g = contiguous::<T>(s2, l2, self.name())?;
            Ok((
                T::to_cpu_storage_owned(dw_weight_grad(x, g, dims, k)),
                Shape::from((dims.3, 1, k, k)),
            ))
        })
    }
}

/// Depthwise convolution of a channels-last tensor with a `(C, 1, k, k)`
/// weight, same padding.
pub fn depthwise_conv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    x.contiguous()?
        .apply_op2(&w.contiguous()?, DwConv { flip: false })
}

// ----------------------------------------------------------- 3x3 convolution

/// Same-padded 3x3 convolution of channels-last `(B, H, W, Cin)` input with
/// taps `(9, Cin, Cout)`, tap `t` at offset `(t / 3 - 1, t % 3 - 1)`.
struct Conv3x3Same;
/// `(grad_out, taps) -> grad_x`.
struct Conv3x3InputGrad;
/// `(x, grad_out) -> grad_taps`.
struct Conv3x3WeightGrad;

/// `dst += lhs * rhs` with explicit `(row, col)` strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Elem>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    dst_rs: usize,
    lhs: &[T],
    (lhs_rs, lhs_cs): (usize, usize),
    rhs: &[T],
    (rhs_rs, rhs_cs): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, c: usize| (r - 1) * rs + (c - 1) * cs;
    assert!(last(dst_rs, 1, m, n) < dst.len());
    assert!(last(lhs_rs, lhs_cs, m, k) < lhs.len());
    assert!(last(rhs_rs, rhs_cs, k, n) < rhs.len());
    // SAFETY: every index the kernel touches is bounded by the asserts above.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_rs as isize,
            true,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn pad_hw<T: Elem>(x: &[T], (b, h, w, c): (usize, usize, usize, usize)) -> Vec<T> {
    let wp = w + 2;
    let mut out = vec![T::zero(); b * (h + 2) * wp * c];
    for bi in 0..b {
        for y in 0..h {
            let src = ((bi * h + y) * w) * c;
            let dst = ((bi * (h + 2) + y + 1) * wp + 1) * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
    }
    out
}

fn tap_offset(t: usize, wp: usize) -> isize {
    (t as isize / 3 - 1) * wp as isize + (t as isize % 3 - 1)
}

/// With `flip`, tap `t` uses `taps[8 - t]` transposed: the adjoint of the
/// forward convolution.
fn conv3x3_kernel<T: Elem>(
    x: &[T],
    taps: &[T],
    dims: (usize, usize, usize, usize),
    c_out: usize,
    flip: bool,
) -> Vec<T> {
    let (b, h, w, c_in) = dims;
    let xp = pad_hw(x, dims);
    let wp = w + 2;
    let np = (h + 2) * wp;
    let start = wp + 1;
    let len = np - 2 * start;
    let mut out = vec![T::zero(); b * h * w * c_out];
    let mut acc = vec![T::zero(); len * c_out];
    for bi in 0..b {
        acc.iter_mut().for_each(|v| *v = T::zero());
        let img = &xp[bi * np * c_in..(bi + 1) * np * c_in];
        for t in 0..9 {
            let from = (start as isize + tap_offset(t, wp)) as usize * c_in;
            let (rhs, strides) = if flip {
                (&taps[(8 - t) * c_in * c_out..], (1, c_in))
            } else {
                (&taps[t * c_in * c_out..], (c_out, 1))
            };
            gemm_acc(
                (len, c_out, c_in),
                &mut acc,
                c_out,
                &img[from..],
                (c_in, 1),
                rhs,
                strides,
            );
        }
        for y in 0..h {
            let src = ((y + 1) * wp + 1 - start) * c_out;
            let dst = ((bi * h + y) * w) * c_out;
            out[dst..dst + w * c_out].copy_from_slice(&acc[src..src + w * c_out]);
        }
    }
    out
}

fn conv3x3_weight_grad<T: Elem>(
    x: &[T],
    g: &[T],
    dims: (usize, usize, usize, usize),
    c_out: usize,
) -> Vec<T> {
    let (b, h, w, c_in) = dims;
    let xp = pad_hw(x, dims);
    let gp = pad_hw(g, (b, h, w, c_out));
    let wp = w + 2;
    let np = (h + 2) * wp;
    let start = wp + 1;
    let len = np - 2 * start;
    let mut out = vec![T::zero(); 9 * c_in * c_out];
    for bi in 0..b {
        let img = &xp[bi * np * c_in..(bi + 1) * np * c_in];
        // padded grad is zero off the interior, so wrapped rows contribute nothing
        let grad = &gp[(bi * np + start) * c_out..(bi * np + start + len) * c_out];
        for (t, dst) in out.chunks_exact_mut(c_in * c_out).enumerate() {
            let from = (start as isize + tap_offset(t, wp)) as usize * c_in;
            gemm_acc(
                (c_in, c_out, len),
                dst,
                c_out,
                &img[from..],
                (1, c_in),
                grad,
                (c_out, 1),
            );
        }
    }
    out
}

fn taps_dims(l: &Layout, op: &str) -> Result<(usize, usize)> {
    match l.dims() {
        &[9, c_in, c_out] => Ok((c_in, c_out)),
        d => candle_core::bail!("{op}: taps must be (9, Cin, Cout), got {d:?}"),
    }
}

impl CustomOp2 for Conv3x3Same {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (c_in, c_out) = taps_dims(l2, self.name())?;
        if dims.3 != c_in {
            candle_core::bail!("conv3x3: input has {} channels, taps expect {c_in}", dims.3);
        }
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let taps = contiguous::<T>(s2, l2, self.name())?;
            let out = conv3x3_kernel(x, taps, dims, c_out, false);
            Ok((
                T::to_cpu_storage_owned(out),
                Shape::from((dims.0, dims.1, dims.2, c_out)),
            ))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        taps: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        let gx = g.apply_op2_no_bwd(taps, &Conv3x3InputGrad)?;
        let gt = x.apply_op2_no_bwd(&g, &Conv3x3WeightGrad)?;
        Ok((Some(gx), Some(gt)))
    }
}

impl CustomOp2 for Conv3x3InputGrad {
    fn name(&self) -> &'static str {
        "conv3x3-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (c_in, _) = taps_dims(l2, self.name())?;
        dispatch!(s1, self.name(), |T| {
            let g = contiguous::<T>(s1, l1, self.name())?;
            let taps = contiguous::<T>(s2, l2, self.name())?;
            let out = conv3x3_kernel(g, taps, dims, c_in, true);
            Ok((
                T::to_cpu_storage_owned(out),
                Shape::from((dims.0, dims.1, dims.2, c_in)),
            ))
        })
    }
}

impl CustomOp2 for Conv3x3WeightGrad {
    fn name(&self) -> &'static str {
        "conv3x3-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let c_out = l2.shape().dims4()?.3;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let g = contiguous::<T>(s2, l2, self.name())?;
            let out = conv3x3_weight_grad(x, g, dims, c_out);
            Ok((
                T::to_cpu_storage_owned(out),
                Shape::from((9, dims.3, c_out)),
            ))
        })
    }
}

/// Same-padded 3x3 convolution; `taps` is `(9, Cin, Cout)`.
pub fn conv3x3(x: &Tensor, taps: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&taps.contiguous()?, Conv3x3Same)
}

// ----------------------------------------------------------- normalization

/// Normalization with a per-channel affine over `(B, N, C)` data. `C` splits
/// into `groups` slices and each `(b, group)` is standardized over
/// `N x C/groups` entries. `groups = 1, N = 1` is LayerNorm over channels.
#[derive(Clone, Copy)]
struct NormAffine {
    groups: usize,
    eps: f64,
}

/// `(x, gamma, grad_out) -> grad_x`.
struct NormAffineGradX(NormAffine);
/// `(x, grad_out) -> (2, C)` rows `[grad_gamma, grad_beta]`.
struct NormAffineGradParams(NormAffine);

fn dims3(l: &Layout, op: &str) -> Result<(usize, usize, usize)> {
    l.shape().dims3().map_err(|_| {
        candle_core::Error::msg(format!("{op}: expected (B, N, C), got {:?}", l.dims()))
    })
}

/// Per-(b, group) mean and inverse std.
fn group_stats<T: Elem>(
    x: &[T],
    (b, n, c): (usize, usize, usize),
    groups: usize,
    eps: f64,
) -> Vec<(T, T)> {
    let cg = c / groups;
    let count = T::from(n * cg).unwrap();
    let mut stats = Vec::with_capacity(b * groups);
    for bi in 0..b {
        let mut sum = vec![T::zero(); groups];
        for r in 0..n {
            let row = &x[(bi * n + r) * c..(bi * n + r + 1) * c];
            for (g, s) in sum.iter_mut().enumerate() {
                *s += row[g * cg..(g + 1) * cg]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
            }
        }
        let mean: Vec<T> = sum.iter().map(|&s| s / count).collect();
        let mut var = vec![T::zero(); groups];
        for r in 0..n {
            let row = &x[(bi * n + r) * c..(bi * n + r + 1) * c];
            for (g, v) in var.iter_mut().enumerate() {
                let m = mean[g];
                *v += row[g * cg..(g + 1) * cg]
                    .iter()
                    .fold(T::zero(), |a, &x| a + (x - m) * (x - m));
            }
        }
        for g in 0..groups {
            stats.push((
                mean[g],
                (var[g] / count + T::from(eps).unwrap()).sqrt().recip(),
            ));
        }
    }
    stats
}

fn norm_affine_kernel<T: Elem>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    dims: (usize, usize, usize),
    groups: usize,
    eps: f64,
) -> Vec<T> {
    let (b, n, c) = dims;
    let cg = c / groups;
    let stats = group_stats(x, dims, groups, eps);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for r in 0..n {
            let o = (bi * n + r) * c;
            for ch in 0..c {
                let (mean, inv) = stats[bi * groups + ch / cg];
                out[o + ch] = (x[o + ch] - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

/// `gx = inv * (gh - mean(gh) - xh * mean(gh * xh))` per group, `gh = g * gamma`.
fn norm_affine_grad_x<T: Elem>(
    x: &[T],
    gamma: &[T],
    gy: &[T],
    dims: (usize, usize, usize),
    groups: usize,
    eps: f64,
) -> Vec<T> {
    let (b, n, c) = dims;
    let cg = c / groups;
    let count = T::from(n * cg).unwrap();
    let stats = group_stats(x, dims, groups, eps);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let mut sg = vec![T::zero(); groups];
        let mut sgx = vec![T::zero(); groups];
        for r in 0..n {
            let o = (bi * n + r) * c;
            for ch in 0..c {
                let g = ch / cg;
                let (mean, inv) = stats[bi * groups + g];
                let gh = gy[o + ch] * gamma[ch];
                sg[g] += gh;
                sgx[g] += gh * (x[o + ch] - mean) * inv;
            }
        }
        for r in 0..n {
            let o = (bi * n + r) * c;
            for ch in 0..c {
                let g = ch / cg;
                let (mean, inv) = stats[bi * groups + g];
                let xh = (x[o + ch] - mean) * inv;
                out[o + ch] = inv * (gy[o + ch] * gamma[ch] - sg[g] / count - xh * sgx[g] / count);
            }
        }
    }
    out
}

fn norm_affine_grad_params<T: Elem>(
    x: &[T],
    gy: &[T],
    dims: (usize, usize, usize),
    groups: usize,
    eps: f64,
) -> Vec<T> {
    let (b, n, c) = dims;
    let cg = c / groups;
    let stats = group_stats(x, dims, groups, eps);
    let mut out = vec![T::zero(); 2 * c];
    for bi in 0..b {
        for r in 0..n {
            let o = (bi * n + r) * c;
            for ch in 0..c {
                let (mean, inv) = stats[bi * groups + ch / cg];
                out[ch] += gy[o + ch] * (x[o + ch] - mean) * inv;
                out[c + ch] += gy[o + ch];
            }
        }
    }
    out
}

impl CustomOp3 for NormAffine {
    fn name(&self) -> &'static str {
        "norm-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims3(l1, self.name())?;
        let NormAffine { groups, eps } = *self;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let g = contiguous::<T>(s2, l2, self.name())?;
            let b = contiguous::<T>(s3, l3, self.name())?;
            Ok((
                T::to_cpu_storage_owned(norm_affine_kernel(x, g, b, dims, groups, eps)),
                l1.shape().clone(),
            ))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        let gx = x.apply_op3_no_bwd(gamma, &g, &NormAffineGradX(*self))?;
        let gp = x.apply_op2_no_bwd(&g, &NormAffineGradParams(*self))?;
        Ok((Some(gx), Some(gp.get(0)?), Some(gp.get(1)?)))
    }
}

impl CustomOp3 for NormAffineGradX {
    fn name(&self) -> &'static str {
        "norm-affine-grad-x"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims3(l1, self.name())?;
        let NormAffine { groups, eps } = self.0;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let gamma = contiguous::<T>(s2, l2, self.name())?;
            let g = contiguous::<T>(s3, l3, self.name())?;
            Ok((
                T::to_cpu_storage_owned(norm_affine_grad_x(x, gamma, g, dims, groups, eps)),
                l1.shape().clone(),
            ))
        })
    }
}

impl CustomOp2 for NormAffineGradParams {
    fn name(&self) -> &'static str {
        "norm-affine-grad-params"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims3(l1, self.name())?;
        let NormAffine { groups, eps } = self.0;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let g = contiguous::<T>(s2, l2, self.name())?;
            Ok((
                T::to_cpu_storage_owned(norm_affine_grad_params(x, g, dims, groups, eps)),
                Shape::from((2, dims.2)),
            ))
        })
    }
}

fn check_affine(gamma: &Tensor, beta: &Tensor, c: usize) -> Result<()> {
    if gamma.dims() != [c] || beta.dims() != [c] {
        candle_core::bail!(
            "norm affine: parameters {:?}/{:?} do not match {c} channels",
            gamma.dims(),
            beta.dims()
        );
    }
    Ok(())
}

/// LayerNorm over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let c = *dims
        .last()
        .ok_or_else(|| candle_core::Error::msg("layer_norm: scalar input"))?;
    check_affine(gamma, beta, c)?;
    let rows = x.elem_count() / c.max(1);
    x.contiguous()?
        .reshape((rows, 1, c))?
        .apply_op3(gamma, beta, NormAffine { groups: 1, eps })?
        .reshape(dims)
}

/// GroupNorm of a channels-last `(B, H, W, C)` tensor with affine.
pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        candle_core::bail!("group norm: {c} channels not divisible into {groups} groups");
    }
    check_affine(gamma, beta, c)?;
    x.contiguous()?
        .reshape((b, h * w, c))?
        .apply_op3(gamma, beta, NormAffine { groups, eps })?
        .reshape((b, h, w, c))
}

// -------------------------------------------------------------- elementwise

/// `x + bias` with `x` viewed as `(outer, C, inner)`.
struct BiasAdd {
    inner: usize,
}
/// Per-channel sums of `(outer, C, inner)`.
struct ChannelSum {
    inner: usize,
}

fn channel_sum<T: Elem>(g: &[T], c: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    if inner == 1 {
        for row in g.chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    } else {
        for (i, plane) in g.chunks_exact(inner).enumerate() {
            out[i % c] += plane.iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    out
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let c = l2.dims().first().copied().unwrap_or(0);
        if l2.dims().len() != 1 || c == 0 || !l1.shape().elem_count().is_multiple_of(c * self.inner)
        {
            candle_core::bail!(
                "bias-add: bias {:?} does not fit input {:?}",
                l2.dims(),
                l1.dims()
            );
        }
        let inner = self.inner;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let b = contiguous::<T>(s2, l2, self.name())?;
            let mut out = x.to_vec();
            if inner == 1 {
                for row in out.chunks_exact_mut(c) {
                    for (o, &v) in row.iter_mut().zip(b) {
                        *o += v;
                    }
                }
            } else {
                for (i, plane) in out.chunks_exact_mut(inner).enumerate() {
                    let v = b[i % c];
                    plane.iter_mut().for_each(|o| *o += v);
                }
            }
            Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
        })
    }

    fn bwd(
        &self,
        _x: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = g
            .contiguous()?
            .apply_op2_no_bwd(b, &ChannelSum { inner: self.inner })?;
        Ok((Some(g.clone()), Some(gb)))
    }
}

impl CustomOp2 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        _s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let c = l2.dims()[0];
        let inner = self.inner;
        dispatch!(s1, self.name(), |T| {
            let g = contiguous::<T>(s1, l1, self.name())?;
            Ok((
                T::to_cpu_storage_owned(channel_sum(g, c, inner)),
                Shape::from(c),
            ))
        })
    }
}

/// `x + bias` broadcast over the last axis.
pub fn bias_add(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(bias, BiasAdd { inner: 1 })
}

/// `x + bias` broadcast over axis 1 of an `(B, C, ..)` tensor.
pub fn bias_add_dim1(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let inner = x.dims().iter().skip(2).product();
    x.contiguous()?.apply_op2(bias, BiasAdd { inner })
}

/// Exact (erf) GELU.
struct Gelu;
struct GeluGrad;

fn gelu_kernel<T: Elem>(x: &[T]) -> Vec<T> {
    let half = T::from(0.5).unwrap();
    let r2 = T::from(std::f64::consts::FRAC_1_SQRT_2).unwrap();
    x.iter()
        .map(|&v| half * v * (T::one() + (v * r2).erf()))
        .collect()
}

fn gelu_grad_kernel<T: Elem>(x: &[T], g: &[T]) -> Vec<T> {
    let half = T::from(0.5).unwrap();
    let r2 = T::from(std::f64::consts::FRAC_1_SQRT_2).unwrap();
    let inv_sqrt_2pi = T::from(0.398_942_280_401_432_7).unwrap();
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| {
            let cdf = half * (T::one() + (v * r2).erf());
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            gv * (cdf + v * pdf)
        })
        .collect()
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        dispatch!(s, self.name(), |T| {
            let x = contiguous::<T>(s, l, self.name())?;
            Ok((T::to_cpu_storage_owned(gelu_kernel(x)), l.shape().clone()))
        })
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, g: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&g.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let g = contiguous::<T>(s2, l2, self.name())?;
            Ok((
                T::to_cpu_storage_owned(gelu_grad_kernel(x, g)),
                l1.shape().clone(),
            ))
        })
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

// --------------------------------------------------------------------- GRN

/// Global response normalization over `(B, N, C)`:
/// `G_c = ||x_c||`, `N_c = G_c / (mean_c G + 1e-6)`,
/// `y = gamma * x * N + beta + x`.
struct GrnOp;
struct GrnGradX;
struct GrnGradParams;

const GRN_EPS: f64 = 1e-6;
/// Keeps the norm differentiable for all-zero channels.
const GRN_NORM_FLOOR: f64 = 1e-12;

/// Per-(b, c) `(G, N)` and per-b denominator.
fn grn_stats<T: Elem>(x: &[T], (b, n, c): (usize, usize, usize)) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gn = vec![T::zero(); b * c];
    for bi in 0..b {
        let acc = &mut gn[bi * c..(bi + 1) * c];
        for r in 0..n {
            let row = &x[(bi * n + r) * c..(bi * n + r + 1) * c];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v * v;
            }
        }
        for a in acc.iter_mut() {
            *a = (*a + T::from(GRN_NORM_FLOOR).unwrap()).sqrt();
        }
    }
    let mut den = vec![T::zero(); b];
    let mut nx = vec![T::zero(); b * c];
    for bi in 0..b {
        let mean = gn[bi * c..(bi + 1) * c]
            .iter()
            .fold(T::zero(), |a, &v| a + v)
            / T::from(c).unwrap();
        den[bi] = mean + T::from(GRN_EPS).unwrap();
        for ch in 0..c {
            nx[bi * c + ch] = gn[bi * c + ch] / den[bi];
        }
    }
    (gn, nx, den)
}

fn grn_kernel<T: Elem>(x: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize)) -> Vec<T> {
    let (b, n, c) = dims;
    let (_, nx, _) = grn_stats(x, dims);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for r in 0..n {
            let o = (bi * n + r) * c;
            for ch in 0..c {
                let v = x[o + ch];
                out[o + ch] = gamma[ch] * v * nx[bi * c + ch] + beta[ch] + v;
            }
        }
    }
    out
}

fn grn_grad_x<T: Elem>(x: &[T], gamma: &[T], gy: &[T], dims: (usize, usize, usize)) -> Vec<T> {
    let (b, n, c) = dims;
    let (gn, nx, den) = grn_stats(x, dims);
    let cf = T::from(c).unwrap();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        // s_c = sum_n g * gamma * x
        let mut s = vec![T::zero(); c];
        for r in 0..n {
            let o = (bi * n + r) * c;
            for ch in 0..c {
                s[ch] += gy[o + ch] * gamma[ch] * x[o + ch];
            }
        }
        let d = den[bi];
        let cross = (0..c).fold(T::zero(), |a, ch| a + s[ch] * gn[bi * c + ch]) / (cf * d * d);
        // dL/dG_c divided by G_c
        let dg: Vec<T> = (0..c)
            .map(|ch| (s[ch] / d - cross) / gn[bi * c + ch])
            .collect();
        for r in 0..n {
            let o = (bi * n + r) * c;
            for ch in 0..c {
                let v = x[o + ch];
                out[o + ch] = gy[o + ch] * (T::one() + gamma[ch] * nx[bi * c + ch]) + dg[ch] * v;
            }
        }
    }
    out
}

fn grn_grad_params<T: Elem>(x: &[T], gy: &[T], dims: (usize, usize, usize)) -> Vec<T> {
    let (b, n, c) = dims;
    let (_, nx, _) = grn_stats(x, dims);
    let mut out = vec![T::zero(); 2 * c];
    for bi in 0..b {
        for r in 0..n {
            let o = (bi * n + r) * c;
            for ch in 0..c {
                out[ch] += gy[o + ch] * x[o + ch] * nx[bi * c + ch];
                out[c + ch] += gy[o + ch];
            }
        }
    }
    out
}

impl CustomOp3 for GrnOp {
    fn name(&self) -> &'static str {
        "grn"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims3(l1, self.name())?;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let g = contiguous::<T>(s2, l2, self.name())?;
            let b = contiguous::<T>(s3, l3, self.name())?;
            Ok((
                T::to_cpu_storage_owned(grn_kernel(x, g, b, dims)),
                l1.shape().clone(),
            ))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        let gx = x.apply_op3_no_bwd(gamma, &g, &GrnGradX)?;
        let gp = x.apply_op2_no_bwd(&g, &GrnGradParams)?;
        Ok((Some(gx), Some(gp.get(0)?), Some(gp.get(1)?)))
    }
}

impl CustomOp3 for GrnGradX {
    fn name(&self) -> &'static str {
        "grn-grad-x"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims3(l1, self.name())?;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let gamma = contiguous::<T>(s2, l2, self.name())?;
            let g = contiguous::<T>(s3, l3, self.name())?;
            Ok((
                T::to_cpu_storage_owned(grn_grad_x(x, gamma, g, dims)),
                l1.shape().clone(),
            ))
        })
    }
}

impl CustomOp2 for GrnGradParams {
    fn name(&self) -> &'static str {
        "grn-grad-params"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims3(l1, self.name())?;
        dispatch!(s1, self.name(), |T| {
            let x = contiguous::<T>(s1, l1, self.name())?;
            let g = contiguous::<T>(s2, l2, self.name())?;
            Ok((
                T::to_cpu_storage_owned(grn_grad_params(x, g, dims)),
                Shape::from((2, dims.2)),
            ))
        })
    }
}

/// GRN of a channels-last `(B, H, W, C)` tensor with `(C,)` parameters.
pub fn grn(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    check_affine(gamma, beta, c)?;
    x.contiguous()?
        .reshape((b, h * w, c))?
        .apply_op3(gamma, beta, GrnOp)?
        .reshape((b, h, w, c))
}

// -------------------------------------------------------------------- loss

/// Per-plane cross-entropy `lse(z) * sum(y) - sum(y * z)` for `(P, N)`
/// logits and targets; gradient flows to the logits only.
struct PlaneCrossEntropy;
struct PlaneCrossEntropyGrad;

fn plane_ce<T: Elem>(z: &[T], y: &[T], n: usize) -> Vec<T> {
    z.chunks_exact(n)
        .zip(y.chunks_exact(n))
        .map(|(zp, yp)| {
            let m = zp.iter().fold(T::neg_infinity(), |a, &v| Float::max(a, v));
            let lse = m + zp.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
            let (sy, syz) = zp
                .iter()
                .zip(yp)
                .fold((T::zero(), T::zero()), |(a, b), (&zv, &yv)| {
                    (a + yv, b + yv * zv)
                });
            lse * sy - syz
        })
        .collect()
}

/// `(z, y, g) -> g_p * (softmax(z_p) * sum(y_p) - y_p)`.
fn plane_ce_grad<T: Elem>(z: &[T], y: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); z.len()];
    for (p, ((zp, yp), op)) in z
        .chunks_exact(n)
        .zip(y.chunks_exact(n))
        .zip(out.chunks_exact_mut(n))
        .enumerate()
    {
        let m = zp.iter().fold(T::neg_infinity(), |a, &v| Float::max(a, v));
        let se = zp.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
        let sy = yp.iter().fold(T::zero(), |a, &v| a + v);
        for ((o, &zv), &yv) in op.iter_mut().zip(zp).zip(yp) {
            *o = g[p] * ((zv - m).exp() / se * sy - yv);
        }
    }
    out
}

fn dims2(l: &Layout, op: &str) -> Result<(usize, usize)> {
    l.shape()
        .dims2()
        .map_err(|_| candle_core::Error::msg(format!("{op}: expected (P, N), got {:?}", l.dims())))
}

impl CustomOp2 for PlaneCrossEntropy {
    fn name(&self) -> &'static str {
        "plane-cross-entropy"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (p, n) = dims2(l1, self.name())?;
        if l2.dims() != l1.dims() {
            candle_core::bail!(
                "{}: target {:?} vs logits {:?}",
                self.name(),
                l2.dims(),
                l1.dims()
            );
        }
        dispatch!(s1, self.name(), |T| {
            let z = contiguous::<T>(s1, l1, self.name())?;
            let y = contiguous::<T>(s2, l2, self.name())?;
            Ok((T::to_cpu_storage_owned(plane_ce(z, y, n)), Shape::from(p)))
        })
    }

    fn bwd(
        &self,
        z: &Tensor,
        y: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let gz = z.apply_op3_no_bwd(y, &g.contiguous()?, &PlaneCrossEntropyGrad)?;
        Ok((Some(gz), None))
    }
}

impl CustomOp3 for PlaneCrossEntropyGrad {
    fn name(&self) -> &'static str {
        "plane-cross-entropy-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (_, n) = dims2(l1, self.name())?;
        dispatch!(s1, self.name(), |T| {
            let z = contiguous::<T>(s1, l1, self.name())?;
            let y = contiguous::<T>(s2, l2, self.name())?;
            let g = contiguous::<T>(s3, l3, self.name())?;
            Ok((
                T::to_cpu_storage_owned(plane_ce_grad(z, y, g, n)),
                l1.shape().clone(),
            ))
        })
    }
}

/// Cross-entropy of each row's softmax against the row's target mass.
pub fn plane_cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    logits
        .contiguous()?
        .apply_op2(&target.contiguous()?, PlaneCrossEntropy)
}

// ------------------------------------------------------------ reshaping ops

/// `(B, H, W, C) -> (B, H/s, W/s, s*s*C)`, patch entries ordered `(ky, kx, c)`.
pub fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % s != 0 || w % s != 0 {
        candle_core::bail!("space_to_depth: {h}x{w} not divisible by {s}");
    }
    x.reshape((b * h / s, s, w / s, s * c))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, h / s, w / s, s * s * c))
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, h, w, ssc) = x.dims4()?;
    if ssc % (s * s) != 0 {
        candle_core::bail!("depth_to_space: {ssc} channels not divisible by {}", s * s);
    }
    let c = ssc / (s * s);
    x.reshape((b * h, w, s, s * c))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, h * s, w * s, c))
}

/// Bilinear interpolation matrix `(out, inp)` with half-pixel centres and
/// edge clamping.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let f = src - i0 as f64;
        m[o * inp + i0] += 1.0 - f;
        m[o * inp + i1] += f;
    }
    m
}

/// Bilinear resize of a channels-last tensor to `(out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let ry = Tensor::from_vec(bilinear_matrix(out_h, h), (out_h, h), dev)?.to_dtype(dt)?;
    let rx = Tensor::from_vec(bilinear_matrix(out_w, w), (out_w, w), dev)?.to_dtype(dt)?;
    let y = ry.broadcast_matmul(&x.contiguous()?.reshape((b, h, w * c))?)?;
    let y = rx.broadcast_matmul(&y.reshape((b * out_h, w, c))?)?;
    y.reshape((b, out_h, out_w, c))
}

/// True when `dt` is a floating type the kernels support.
pub fn supported_dtype(dt: DType) -> bool {
    matches!(dt, DType::F32 | DType::F64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let v: Vec<f64> = (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let x = rand(&[2, 6, 5, 3], 1);
        let w = rand(&[3, 1, 7, 7], 2);
        let ours = depthwise_conv(&x, &w).unwrap();
        let reference = x
            .permute((0, 3, 1, 2))
            .unwrap()
            .conv2d(&w, 3, 1, 1, 3)
            .unwrap()
            .permute((0, 2, 3, 1))
            .unwrap();
        assert!(max_abs_diff(&ours, &reference) < 1e-12);
    }

    #[test]
    fn space_depth_round_trip() {
        let x = rand(&[2, 8, 4, 3], 5);
        let y = space_to_depth(&x, 4).unwrap();
        assert_eq!(y.dims(), &[2, 2, 1, 48]);
        assert_eq!(max_abs_diff(&depth_to_space(&y, 4).unwrap(), &x), 0.0);
        // first patch entry (ky=0, kx=1) is pixel (0, 1)
        let v = y
            .get(0)
            .unwrap()
            .get(0)
            .unwrap()
            .get(0)
            .unwrap()
            .narrow(0, 3, 3)
            .unwrap();
        let p = x.get(0).unwrap().get(0).unwrap().get(1).unwrap();
        assert_eq!(max_abs_diff(&v, &p), 0.0);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        let m = bilinear_matrix(16, 2);
        for r in m.chunks(2) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // identical sizes give the identity
        let id = bilinear_matrix(4, 4);
        for i in 0..4 {
            assert_eq!(id[i * 4 + i], 1.0);
        }
    }

    /// Central finite differences of `sum(f(x) * r)` against autograd.
    fn check_grad(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, seed: u64) {
        let var = Var::from_tensor(x).unwrap();
        let y = f(var.as_tensor());
        let r = rand(y.dims(), seed);
        let grads = (y * &r).unwrap().sum_all().unwrap().backward().unwrap();
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in (0..base.len()).step_by(base.len().div_ceil(40)) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap();
                (f(&t) * &r)
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let tol = 1e-6 * (1.0 + numeric.abs());
            assert!(
                (numeric - analytic[i]).abs() < tol,
                "index {i}: {numeric} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn depthwise_gradients() {
        let x = rand(&[1, 5, 6, 2], 7);
        let w = rand(&[2, 1, 7, 7], 8);
        check_grad(|t| depthwise_conv(t, &w).unwrap(), &x, 9);
        check_grad(|t| depthwise_conv(&x, t).unwrap(), &w, 10);
    }

    #[test]
    fn conv3x3_matches_reference() {
        let x = rand(&[2, 5, 4, 3], 44);
        let w = rand(&[2, 3, 3, 3], 45);
        let taps = w.permute((2, 3, 1, 0)).unwrap().reshape((9, 3, 2)).unwrap();
        let reference = x
            .permute((0, 3, 1, 2))
            .unwrap()
            .conv2d(&w, 1, 1, 1, 1)
            .unwrap()
            .permute((0, 2, 3, 1))
            .unwrap();
        assert!(max_abs_diff(&conv3x3(&x, &taps).unwrap(), &reference) < 1e-12);
        check_grad(|t| conv3x3(t, &taps).unwrap(), &x, 46);
        check_grad(|t| conv3x3(&x, t).unwrap(), &taps, 47);
    }

    #[test]
    fn fast_erf_accuracy() {
        for i in -400..=400 {
            let v = i as f64 / 100.0;
            assert!(
                (Elem::erf(v as f32) as f64 - libm::erf(v)).abs() < 3e-7,
                "{v}"
            );
        }
    }

    #[test]
    fn norm_gradients() {
        let x = rand(&[2, 3, 2, 4], 13);
        let gamma = (rand(&[4], 20) + 1.5).unwrap();
        let beta = rand(&[4], 21);
        check_grad(|t| layer_norm(t, &gamma, &beta, 1e-6).unwrap(), &x, 14);
        check_grad(|t| group_norm(t, &gamma, &beta, 2, 1e-5).unwrap(), &x, 15);
        check_grad(|t| group_norm(&x, t, &beta, 2, 1e-5).unwrap(), &gamma, 22);
        check_grad(|t| layer_norm(&x, &gamma, t, 1e-6).unwrap(), &beta, 23);
    }

    #[test]
    fn elementwise_gradients() {
        let x = (rand(&[1, 3, 3, 5], 24) * 3.0).unwrap();
        let b = rand(&[5], 25);
        check_grad(|t| gelu(t).unwrap(), &x, 26);
        check_grad(|t| bias_add(t, &b).unwrap(), &x, 27);
        check_grad(|t| bias_add(&x, t).unwrap(), &b, 28);
        let bc = rand(&[3], 41);
        check_grad(|t| bias_add_dim1(t, &bc).unwrap(), &x, 42);
        check_grad(|t| bias_add_dim1(&x, t).unwrap(), &bc, 43);
        let reference = x.broadcast_add(&bc.reshape((1, 3, 1, 1)).unwrap()).unwrap();
        assert!(max_abs_diff(&bias_add_dim1(&x, &bc).unwrap(), &reference) < 1e-15);
    }

    #[test]
    fn grn_gradients() {
        let x = rand(&[2, 3, 2, 4], 29);
        let gamma = rand(&[4], 30);
        let beta = rand(&[4], 31);
        check_grad(|t| grn(t, &gamma, &beta).unwrap(), &x, 32);
        check_grad(|t| grn(&x, t, &beta).unwrap(), &gamma, 33);
        check_grad(|t| grn(&x, &gamma, t).unwrap(), &beta, 34);
    }

    #[test]
    fn cross_entropy_gradient() {
        let y = rand(&[3, 7], 35).abs().unwrap();
        let z = (rand(&[3, 7], 36) * 4.0).unwrap();
        check_grad(|t| plane_cross_entropy(t, &y).unwrap(), &z, 37);
    }

    #[test]
    fn matches_composed_reference() {
        let x = (rand(&[1, 4, 3, 6], 38) * 2.0).unwrap();
        let gamma = rand(&[6], 39);
        let beta = rand(&[6], 40);
        // GELU against candle's erf GELU
        assert!(max_abs_diff(&gelu(&x).unwrap(), &x.gelu_erf().unwrap()) < 1e-12);
        // GRN against the composed definition
        let gx = x
            .sqr()
            .unwrap()
            .sum_keepdim((1, 2))
            .unwrap()
            .sqrt()
            .unwrap();
        let nx = gx
            .broadcast_div(&(gx.mean_keepdim(3).unwrap() + 1e-6).unwrap())
            .unwrap();
        let reference = (x
            .broadcast_mul(&nx)
            .unwrap()
            .broadcast_mul(&gamma)
            .unwrap()
            .broadcast_add(&beta)
            .unwrap()
            + &x)
            .unwrap();
        assert!(max_abs_diff(&grn(&x, &gamma, &beta).unwrap(), &reference) < 1e-9);
        // LayerNorm against the composed definition
        let mean = x.mean_keepdim(3).unwrap();
        let xc = x.broadcast_sub(&mean).unwrap();
        let var = xc.sqr().unwrap().mean_keepdim(3).unwrap();
        let reference = xc
            .broadcast_div(&(var + 1e-6).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&gamma)
            .unwrap()
            .broadcast_add(&beta)
            .unwrap();
        assert!(max_abs_diff(&layer_norm(&x, &gamma, &beta, 1e-6).unwrap(), &reference) < 1e-12);
    }

    #[test]
    fn resize_gradient() {
        let x = rand(&[1, 2, 3, 2], 16);
        check_grad(|t| resize_bilinear(t, 8, 12).unwrap(), &x, 17);
    }

    #[test]
    fn group_norm_statistics() {
        let x = rand(&[1, 4, 4, 6], 18);
        let ones = Tensor::ones(6, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(6, DType::F64, &Device::Cpu).unwrap();
        let y = group_norm(&x, &ones, &zeros, 3, 0.0).unwrap();
        let g = y.reshape((16, 3, 2)).unwrap();
        let mean = g
            .mean_keepdim(0)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        let var = g
            .sqr()
            .unwrap()
            .mean_keepdim(0)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }
}
