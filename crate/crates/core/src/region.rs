//! Region-of-interest cropping: detection selection, deterministic fallback
//! preprocessing, and resizing to the network input height.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resized_dims, BoundingBox, Point2, RegionTransform};
use crate::imageops::{crop, pad_bottom_right, resize_scaled};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: BoundingBox<T>,
    pub score: T,
}

/// Anything that proposes scored face-region boxes in original-image pixels.
pub trait RegionDetector<T> {
    fn detect(&self, image: &Array2<T>) -> Result<Vec<Detection<T>>>;
}

/// Preprocessing used when no detection clears the score threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackMode {
    /// Fail the image.
    None,
    /// Centre-crop excess width, or zero-pad the right edge, to the target
    /// aspect ratio. Height is kept.
    PadCrop,
    /// Zero-pad the bottom or right edge to the target aspect ratio, then
    /// resize.
    #[default]
    PadResize,
}

impl std::str::FromStr for FallbackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "pad_crop" => Ok(Self::PadCrop),
            "pad_resize" => Ok(Self::PadResize),
            other => Err(Error::InvalidArgument(format!(
                "unknown fallback '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionPolicy {
    pub score_threshold: f64,
    pub fallback: FallbackMode,
    /// Height of the network input crop.
    pub target_height: usize,
    /// Width / height ratio used by both fallbacks.
    pub fallback_aspect: f64,
}

impl Default for RegionPolicy {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            fallback: FallbackMode::PadResize,
            target_height: 800,
            fallback_aspect: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionSource {
    Detected { score: f64 },
    GroundTruth,
    PadCrop,
    PadResize,
}

/// A resized crop and the transform mapping its coordinates back.
#[derive(Debug, Clone)]
pub struct RegionCrop<T> {
    pub pixels: Array2<T>,
    pub transform: RegionTransform<T>,
    pub source: RegionSource,
}

/// Highest-scoring detection strictly above `threshold`; ties go to the
/// larger box.
pub fn select_detection<T: Scalar>(
    detections: &[Detection<T>],
    threshold: T,
) -> Option<&Detection<T>> {
    detections
        .iter()
        .filter(|d| d.score > threshold && d.score.is_finite())
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(
                    a.bbox
                        .area()
                        .partial_cmp(&b.bbox.area())
                        .unwrap_or(std::cmp::Ordering::Equal),
                )
        })
}

/// Resizes `crop` to `target_height` keeping its aspect ratio. Returns the
/// pixels and the scale (resized px per original px).
pub fn resize_to_height<T: Scalar>(
    crop: &Array2<T>,
    target_height: usize,
) -> Result<(Array2<T>, f64)> {
    let (h, w) = crop.dim();
    let (out_h, out_w, scale) = resized_dims(h, w, target_height)?;
    if out_h == h && out_w == w {
        return Ok((crop.clone(), 1.0));
    }
    Ok((resize_scaled(crop, out_h, out_w, scale), scale))
}

fn finish<T: Scalar>(
    region: Array2<T>,
    origin: (usize, usize),
    target_height: usize,
    source: RegionSource,
) -> Result<RegionCrop<T>> {
    let (pixels, scale) = resize_to_height(&region, target_height)?;
    let transform = RegionTransform {
        crop_origin: Point2::new(T::from_usize_lossy(origin.0), T::from_usize_lossy(origin.1)),
        scale: T::c(scale),
        resized_size: pixels.dim(),
    };
    Ok(RegionCrop {
        pixels,
        transform,
        source,
    })
}

/// Crops the integer pixel cover of `bbox` and resizes it.
pub fn crop_box<T: Scalar>(
    image: &Array2<T>,
    bbox: &BoundingBox<T>,
    target_height: usize,
    source: RegionSource,
) -> Result<RegionCrop<T>> {
    let (h, w) = image.dim();
    let (x0, y0, x1, y1) = bbox.pixel_bounds(h, w);
    finish(crop(image, x0, y0, x1, y1), (x0, y0), target_height, source)
}

pub fn apply_fallback<T: Scalar>(
    image: &Array2<T>,
    mode: FallbackMode,
    policy: &RegionPolicy,
) -> Option<Result<RegionCrop<T>>> {
    let (h, w) = image.dim();
    let aspect = policy.fallback_aspect;
    match mode {
        FallbackMode::None => None,
        FallbackMode::PadCrop => {
            let want_w = ((h as f64 * aspect).round() as usize).max(1);
            let (region, x0) = if w > want_w {
                let x0 = (w - want_w) / 2;
                (crop(image, x0, 0, x0 + want_w, h), x0)
            } else {
                (pad_bottom_right(image, h, want_w), 0)
            };
            Some(finish(
                region,
                (x0, 0),
                policy.target_height,
                RegionSource::PadCrop,
            ))
        }
        FallbackMode::PadResize => {
            let region = if (w as f64) < h as f64 * aspect {
                pad_bottom_right(image, h, (h as f64 * aspect).round() as usize)
            } else {
                pad_bottom_right(image, ((w as f64 / aspect).round() as usize).max(h), w)
            };
            Some(finish(
                region,
                (0, 0),
                policy.target_height,
                RegionSource::PadResize,
            ))
        }
    }
}

/// Crops the face region of one image: the best detection when one clears
/// the threshold, otherwise the configured fallback.
pub fn extract_region<T: Scalar>(
    image_id: &str,
    image: &Array2<T>,
    detector: Option<&dyn RegionDetector<T>>,
    policy: &RegionPolicy,
) -> Result<RegionCrop<T>> {
    if let Some(det) = detector {
        let detections = det.detect(image)?;
        if let Some(best) = select_detection(&detections, T::c(policy.score_threshold)) {
            let (h, w) = image.dim();
            let bbox = best.bbox.clamp_to(h, w)?;
            let score = best.score.to_f64_lossy();
            return crop_box(
                image,
                &bbox,
                policy.target_height,
                RegionSource::Detected { score },
            );
        }
    }
    apply_fallback(image, policy.fallback, policy).unwrap_or_else(|| {
        Err(Error::NoDetection {
            id: image_id.to_string(),
        })
    })
}
