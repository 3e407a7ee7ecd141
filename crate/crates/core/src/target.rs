use ndarray::{s, Array3};

use crate::geometry::Point2;
use crate::imageops::gaussian_kernel_1d;
use crate::scalar::Scalar;

/// Per-landmark target planes `(L, H, W)` and a validity mask. Invalid
/// landmarks (outside the frame) have all-zero planes.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetHeatmap<T> {
    pub planes: Array3<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> TargetHeatmap<T> {
    pub fn n_landmarks(&self) -> usize {
        self.valid.len()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Nearest pixel for `v`, half away from zero, or `None` when `v` is outside
/// `[0, extent)`.
fn pixel_index<T: Scalar>(v: T, extent: usize) -> Option<usize> {
    if !v.is_finite() || v < T::zero() || v >= T::from_usize_lossy(extent) {
        return None;
    }
    let r = v.round().to_usize()?;
    Some(r.min(extent - 1))
}

/// One-hot planes at the rounded landmark pixels, convolved with a
/// normalised Gaussian truncated at `4 sigma`.
///
/// Kernels clipped by the frame are not renormalised, so border targets sum
/// to less than one. `sigma == 0` gives exact one-hot planes.
pub fn encode_target<T: Scalar>(
    coords: &[Point2<T>],
    height: usize,
    width: usize,
    sigma: f64,
) -> TargetHeatmap<T> {
    assert!(height >= 1 && width >= 1, "target plane must be non-empty");
    let taps: Vec<T> = gaussian_kernel_1d(sigma).into_iter().map(T::c).collect();
    let r = (taps.len() / 2) as i64;
    let mut planes = Array3::<T>::zeros((coords.len(), height, width));
    let mut valid = vec![false; coords.len()];
    for (l, p) in coords.iter().enumerate() {
        let (Some(cx), Some(cy)) = (pixel_index(p.x, width), pixel_index(p.y, height)) else {
            continue;
        };
        valid[l] = true;
        let y_lo = (cy as i64 - r).max(0) as usize;
        let y_hi = ((cy as i64 + r) as usize).min(height - 1);
        let x_lo = (cx as i64 - r).max(0) as usize;
        let x_hi = ((cx as i64 + r) as usize).min(width - 1);
        let mut plane = planes.slice_mut(s![l, .., ..]);
        for y in y_lo..=y_hi {
            let ky = taps[(y as i64 - cy as i64 + r) as usize];
            for x in x_lo..=x_hi {
                let kx = taps[(x as i64 - cx as i64 + r) as usize];
                plane[[y, x]] = ky * kx;
            }
        }
    }
    TargetHeatmap { planes, valid }
}
