use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scalar::Scalar;

/// How the K hottest pixel coordinates are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopKWeighting {
    /// Plain mean of the K coordinates.
    #[default]
    Uniform,
    /// Mean weighted by `exp(v - v_max)` of each selected value.
    Softmax,
}

/// Mean coordinate `(x = column, y = row)` of the `k` largest values in
/// `plane`. Ties at the k-th value go to the earlier pixel in row-major order.
pub fn decode_topk<T: Scalar>(plane: ArrayView2<T>, k: usize) -> Result<Point2<T>> {
    decode_topk_weighted(plane, k, TopKWeighting::Uniform)
}

pub fn decode_topk_weighted<T: Scalar>(
    plane: ArrayView2<T>,
    k: usize,
    weighting: TopKWeighting,
) -> Result<Point2<T>> {
    let (h, w) = plane.dim();
    if k == 0 || k > h * w {
        return Err(Error::InvalidArgument(format!(
            "K = {k} outside [1, {}]",
            h * w
        )));
    }
    let mut order: Vec<(usize, T)> = Vec::with_capacity(h * w);
    for (i, v) in plane.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite("heatmap"));
        }
        order.push((i, *v));
    }
    // (value desc, index asc) is a total order, so the selected set is unique
    let cmp =
        |a: &(usize, T), b: &(usize, T)| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    // fixed summation order keeps the result independent of the selection algorithm
    order.sort_unstable_by_key(|(i, _)| *i);
    match weighting {
        TopKWeighting::Uniform => {
            let (mut sx, mut sy) = (T::zero(), T::zero());
            for (i, _) in &order {
                sx += T::from_usize_lossy(i % w);
                sy += T::from_usize_lossy(i / w);
            }
            let n = T::from_usize_lossy(order.len());
            Ok(Point2::new(sx / n, sy / n))
        }
        TopKWeighting::Softmax => {
            let max = order
                .iter()
                .map(|(_, v)| *v)
                .fold(T::neg_infinity(), T::max);
            let (mut sx, mut sy, mut sw) = (T::zero(), T::zero(), T::zero());
            for (i, v) in &order {
                let wt = (*v - max).exp();
                sx += wt * T::from_usize_lossy(i % w);
                sy += wt * T::from_usize_lossy(i / w);
                sw += wt;
            }
            Ok(Point2::new(sx / sw, sy / sw))
        }
    }
}

/// Per-landmark arithmetic mean across models.
///
/// Values are summed in sorted order, so the result does not depend on the
/// order of the models.
pub fn ensemble_coords<T: Scalar>(per_model: &[Vec<Point2<T>>]) -> Result<Vec<Point2<T>>> {
    let first = per_model.first().ok_or(Error::Empty("model predictions"))?;
    let n = first.len();
    if let Some(bad) = per_model.iter().find(|m| m.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "model predicted {} landmarks, expected {n}",
            bad.len()
        )));
    }
    let m = T::from_usize_lossy(per_model.len());
    let sorted_sum = |mut vals: Vec<T>| -> T {
        vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        vals.into_iter().fold(T::zero(), |acc, v| acc + v)
    };
    Ok((0..n)
        .map(|l| {
            let xs = per_model.iter().map(|p| p[l].x).collect();
            let ys = per_model.iter().map(|p| p[l].y).collect();
            Point2::new(sorted_sum(xs) / m, sorted_sum(ys) / m)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn argmax_and_symmetric_mean() {
        let mut p = Array2::<f64>::zeros((32, 32));
        p[[20, 10]] = 5.0;
        assert_eq!(decode_topk(p.view(), 1).unwrap(), Point2::new(10.0, 20.0));

        let mut q = Array2::<f32>::zeros((8, 8));
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            q[[y, x]] = 3.0;
        }
        assert_eq!(decode_topk(q.view(), 4).unwrap(), Point2::new(0.5, 0.5));
    }

    #[test]
    fn ties_resolve_row_major() {
        let p = Array2::<f64>::ones((3, 3));
        // first three pixels in scan order: (0,0), (1,0), (2,0)
        assert_eq!(decode_topk(p.view(), 3).unwrap(), Point2::new(1.0, 0.0));
    }

    #[test]
    fn errors() {
        let mut p = Array2::<f64>::zeros((2, 2));
        assert!(decode_topk(p.view(), 0).is_err());
        assert!(decode_topk(p.view(), 5).is_err());
        assert!(decode_topk(p.view(), 4).is_ok());
        p[[1, 1]] = f64::NAN;
        assert!(matches!(decode_topk(p.view(), 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_weighting_pulls_to_peak() {
        let mut p = Array2::<f64>::zeros((1, 3));
        p[[0, 0]] = 10.0;
        p[[0, 1]] = 0.0;
        let u = decode_topk_weighted(p.view(), 2, TopKWeighting::Uniform).unwrap();
        let s = decode_topk_weighted(p.view(), 2, TopKWeighting::Softmax).unwrap();
        assert_eq!(u.x, 0.5);
        assert!(s.x < 1e-4);
    }

    #[test]
    fn ensemble_examples() {
        let pts = |v: &[(f64, f64)]| {
            v.iter()
                .map(|&(x, y)| Point2::new(x, y))
                .collect::<Vec<_>>()
        };
        let single = vec![pts(&[(1.5, 2.5), (3.0, 4.0)])];
        assert_eq!(ensemble_coords(&single).unwrap(), single[0]);
        let four = vec![
            pts(&[(10.0, 10.0)]),
            pts(&[(12.0, 14.0)]),
            pts(&[(11.0, 12.0)]),
            pts(&[(11.0, 12.0)]),
        ];
        assert_eq!(ensemble_coords(&four).unwrap(), pts(&[(11.0, 12.0)]));
        let mut rev = four.clone();
        rev.reverse();
        assert_eq!(
            ensemble_coords(&rev).unwrap(),
            ensemble_coords(&four).unwrap()
        );
        assert!(ensemble_coords(&[pts(&[(1.0, 1.0)]), pts(&[])]).is_err());
        assert!(ensemble_coords::<f64>(&[]).is_err());
    }
}
