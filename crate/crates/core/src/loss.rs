//! Reference implementation of the softmax-2D cross-entropy heatmap loss and
//! its analytic gradient.
//!
//! Per landmark plane: `-sum(y * log_softmax(logits))` with the softmax taken
//! over the flattened `H x W` plane. Planes are averaged over the valid
//! landmarks of each sample, then over samples with at least one valid
//! landmark.

use ndarray::{Array4, ArrayView2, ArrayView4, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn log_sum_exp<T: Scalar>(plane: &ArrayView2<T>) -> T {
    let max = plane.iter().cloned().fold(T::neg_infinity(), T::max);
    let sum: T = plane.iter().map(|v| (*v - max).exp()).sum();
    max + sum.ln()
}

/// Cross-entropy of one plane: `lse(z) * sum(y) - sum(y * z)`.
pub fn plane_cross_entropy<T: Scalar>(logits: ArrayView2<T>, target: ArrayView2<T>) -> T {
    let lse = log_sum_exp(&logits);
    let mut mass = T::zero();
    let mut dot = T::zero();
    Zip::from(&logits).and(&target).for_each(|&z, &y| {
        mass += y;
        dot += y * z;
    });
    lse * mass - dot
}

fn check_shapes<T>(
    logits: &ArrayView4<T>,
    target: &ArrayView4<T>,
    valid: &[Vec<bool>],
) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let (b, l) = (logits.shape()[0], logits.shape()[1]);
    if valid.len() != b || valid.iter().any(|v| v.len() != l) {
        return Err(Error::ShapeMismatch(format!(
            "validity mask does not match {b}x{l}"
        )));
    }
    Ok(())
}

/// Per-plane weights `1 / (n_valid(b) * n_samples_with_valid)`, zero for
/// invalid planes.
fn plane_weights(valid: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
    let active = valid.iter().filter(|v| v.iter().any(|x| *x)).count();
    if active == 0 {
        return Err(Error::NoValidLandmarks);
    }
    Ok(valid
        .iter()
        .map(|v| {
            let n = v.iter().filter(|x| **x).count();
            v.iter()
                .map(|&ok| {
                    if ok {
                        1.0 / (n as f64 * active as f64)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

/// Loss over a `B x L x H x W` batch.
pub fn heatmap_loss<T: Scalar>(
    logits: ArrayView4<T>,
    target: ArrayView4<T>,
    valid: &[Vec<bool>],
) -> Result<T> {
    check_shapes(&logits, &target, valid)?;
    let weights = plane_weights(valid)?;
    let mut total = T::zero();
    for (b, wb) in weights.iter().enumerate() {
        for (l, &w) in wb.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let z = logits.slice(ndarray::s![b, l, .., ..]);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("logits"));
            }
            let y = target.slice(ndarray::s![b, l, .., ..]);
            total += T::c(w) * plane_cross_entropy(z, y);
        }
    }
    Ok(total)
}

/// Loss and its gradient with respect to the logits:
/// `w * (softmax(z) * sum(y) - y)` per valid plane.
pub fn heatmap_loss_with_grad<T: Scalar>(
    logits: ArrayView4<T>,
    target: ArrayView4<T>,
    valid: &[Vec<bool>],
) -> Result<(T, Array4<T>)> {
    let loss = heatmap_loss(logits, target, valid)?;
    let weights = plane_weights(valid)?;
    let mut grad = Array4::<T>::zeros(logits.raw_dim());
    for (b, wb) in weights.iter().enumerate() {
        for (l, &w) in wb.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let z = logits.slice(ndarray::s![b, l, .., ..]);
            let y = target.slice(ndarray::s![b, l, .., ..]);
            let lse = log_sum_exp(&z);
            let mass: T = y.iter().cloned().sum();
            let w = T::c(w);
            Zip::from(grad.slice_mut(ndarray::s![b, l, .., ..]))
                .and(&z)
                .and(&y)
                .for_each(|g, &zi, &yi| *g = w * ((zi - lse).exp() * mass - yi));
        }
    }
    Ok((loss, grad))
}
