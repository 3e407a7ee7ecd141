//! Mean radial error and success detection rate, in millimetres.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scalar::Scalar;

/// Success threshold used by the challenge.
pub const SDR_THRESHOLD_MM: f64 = 2.0;

/// One image's predictions against its ground truth.
#[derive(Debug, Clone)]
pub struct ImageEval<'a, T> {
    pub image_id: &'a str,
    pub pred: &'a [Point2<T>],
    pub gt: &'a [Point2<T>],
    pub spacing: T,
}

fn check<T: Scalar>(images: &[ImageEval<'_, T>]) -> Result<()> {
    if images.is_empty() || images.iter().all(|im| im.gt.is_empty()) {
        return Err(Error::Empty("evaluation pairs"));
    }
    for im in images {
        if im.pred.len() != im.gt.len() {
            return Err(Error::ShapeMismatch(format!(
                "'{}': {} predictions vs {} ground-truth points",
                im.image_id,
                im.pred.len(),
                im.gt.len()
            )));
        }
        if !(im.spacing > T::zero()) {
            return Err(Error::InvalidSpacing {
                id: im.image_id.to_string(),
                spacing: im.spacing.to_f64_lossy(),
            });
        }
    }
    Ok(())
}

/// Radial errors in mm, image-major.
pub fn radial_errors_mm<T: Scalar>(images: &[ImageEval<'_, T>]) -> Result<Vec<Vec<T>>> {
    check(images)?;
    Ok(images
        .iter()
        .map(|im| {
            im.pred
                .iter()
                .zip(im.gt)
                .map(|(p, g)| p.distance(g) * im.spacing)
                .collect()
        })
        .collect())
}

/// Mean radial error over all (image, landmark) pairs.
pub fn mre<T: Scalar>(images: &[ImageEval<'_, T>]) -> Result<T> {
    let errs = radial_errors_mm(images)?;
    let n = errs.iter().map(Vec::len).sum::<usize>();
    let total: T = errs.iter().flatten().cloned().sum();
    Ok(total / T::from_usize_lossy(n))
}

/// Percentage of radial errors `<= threshold_mm`.
pub fn sdr<T: Scalar>(images: &[ImageEval<'_, T>], threshold_mm: T) -> Result<T> {
    let errs = radial_errors_mm(images)?;
    let n = errs.iter().map(Vec::len).sum::<usize>();
    let hits = errs
        .iter()
        .flatten()
        .filter(|e| **e <= threshold_mm)
        .count();
    Ok(T::c(100.0) * T::from_usize_lossy(hits) / T::from_usize_lossy(n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore<T> {
    pub image_id: String,
    pub mre_mm: T,
    pub sdr_pct: T,
}

/// Aggregate and per-landmark / per-image breakdown of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<T> {
    pub mre_mm: T,
    pub sdr_2mm_pct: T,
    pub n_images: usize,
    pub per_landmark_mre: Vec<T>,
    pub per_image: Vec<ImageScore<T>>,
}

impl<T: Scalar> EvalReport<T> {
    pub fn compute(images: &[ImageEval<'_, T>]) -> Result<Self> {
        let errs = radial_errors_mm(images)?;
        let thr = T::c(SDR_THRESHOLD_MM);
        let n_landmarks = errs.iter().map(Vec::len).max().unwrap_or(0);
        let mut lm_sum = vec![T::zero(); n_landmarks];
        let mut lm_count = vec![0usize; n_landmarks];
        let mut per_image = Vec::with_capacity(images.len());
        for (im, e) in images.iter().zip(&errs) {
            for (l, v) in e.iter().enumerate() {
                lm_sum[l] += *v;
                lm_count[l] += 1;
            }
            let n = T::from_usize_lossy(e.len().max(1));
            per_image.push(ImageScore {
                image_id: im.image_id.to_string(),
                mre_mm: e.iter().cloned().sum::<T>() / n,
                sdr_pct: T::c(100.0) * T::from_usize_lossy(e.iter().filter(|v| **v <= thr).count())
                    / n,
            });
        }
        Ok(Self {
            mre_mm: mre(images)?,
            sdr_2mm_pct: sdr(images, thr)?,
            n_images: images.len(),
            per_landmark_mre: lm_sum
                .into_iter()
                .zip(lm_count)
                .map(|(s, c)| s / T::from_usize_lossy(c.max(1)))
                .collect(),
            per_image,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point2<f64> {
        Point2::new(x, y)
    }

    #[test]
    fn exact_predictions() {
        let gt = vec![p(1.0, 2.0), p(30.0, 4.0)];
        let ims = [ImageEval {
            image_id: "a",
            pred: &gt,
            gt: &gt,
            spacing: 0.1,
        }];
        assert_eq!(mre(&ims).unwrap(), 0.0);
        assert_eq!(sdr(&ims, 2.0).unwrap(), 100.0);
    }

    #[test]
    fn arithmetic_examples() {
        let gt = vec![p(0.0, 0.0), p(0.0, 0.0)];
        let pred = vec![p(10.0, 0.0), p(0.0, 30.0)];
        let ims = [ImageEval {
            image_id: "a",
            pred: &pred,
            gt: &gt,
            spacing: 0.1,
        }];
        assert!((mre(&ims).unwrap() - 2.0).abs() < 1e-12);
        // 1.0 mm and 3.0 mm
        assert_eq!(sdr(&ims, 2.0).unwrap(), 50.0);
    }

    #[test]
    fn boundary_counts_as_success() {
        let gt = vec![p(5.0, 5.0)];
        let pred = vec![p(5.0, 9.0)];
        let ims = [ImageEval {
            image_id: "a",
            pred: &pred,
            gt: &gt,
            spacing: 0.5,
        }];
        assert_eq!(radial_errors_mm(&ims).unwrap()[0][0], 2.0);
        assert_eq!(sdr(&ims, 2.0).unwrap(), 100.0);
    }

    #[test]
    fn errors() {
        let gt = vec![p(0.0, 0.0)];
        assert!(mre::<f64>(&[]).is_err());
        let ims = [ImageEval {
            image_id: "a",
            pred: &[],
            gt: &gt,
            spacing: 0.1,
        }];
        assert!(mre(&ims).is_err());
        let ims = [ImageEval {
            image_id: "a",
            pred: &gt,
            gt: &gt,
            spacing: 0.0,
        }];
        assert!(sdr(&ims, 2.0).is_err());
    }

    #[test]
    fn report_breakdown() {
        let gt = vec![p(0.0, 0.0), p(0.0, 0.0)];
        let a = vec![p(10.0, 0.0), p(0.0, 30.0)];
        let b = vec![p(0.0, 0.0), p(0.0, 10.0)];
        let ims = [
            ImageEval {
                image_id: "a",
                pred: &a,
                gt: &gt,
                spacing: 0.1,
            },
            ImageEval {
                image_id: "b",
                pred: &b,
                gt: &gt,
                spacing: 0.1,
            },
        ];
        let r = EvalReport::compute(&ims).unwrap();
        assert!((r.mre_mm - 1.25).abs() < 1e-12);
        assert_eq!(r.sdr_2mm_pct, 75.0);
        assert!((r.per_landmark_mre[0] - 0.5).abs() < 1e-12);
        assert!((r.per_landmark_mre[1] - 2.0).abs() < 1e-12);
        assert_eq!(r.per_image[1].sdr_pct, 100.0);
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
