//! Points, boxes and the crop/resize coordinate transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn cast<U: Scalar>(self) -> Point2<U> {
        Point2::new(U::c(self.x.to_f64_lossy()), U::c(self.y.to_f64_lossy()))
    }
}

/// Axis-aligned box in original-image pixels, `x0 < x1` and `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(x0: T, y0: T, x1: T, y1: T) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::DegenerateBox(format!(
                "({x0}, {y0}, {x1}, {y1}) has no area"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> T {
        self.x1 - self.x0
    }

    pub fn height(&self) -> T {
        self.y1 - self.y0
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    /// Strict interior test.
    pub fn contains_strictly(&self, p: &Point2<T>) -> bool {
        p.x > self.x0 && p.x < self.x1 && p.y > self.y0 && p.y < self.y1
    }

    pub fn iou(&self, other: &Self) -> T {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(T::zero());
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(T::zero());
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= T::zero() {
            T::zero()
        } else {
            inter / union
        }
    }

    /// Clamps the box to `[0, width] x [0, height]`.
    pub fn clamp_to(&self, height: usize, width: usize) -> Result<Self> {
        let (w, h) = (T::from_usize_lossy(width), T::from_usize_lossy(height));
        Self::new(
            self.x0.max(T::zero()).min(w),
            self.y0.max(T::zero()).min(h),
            self.x1.max(T::zero()).min(w),
            self.y1.max(T::zero()).min(h),
        )
    }

    /// Smallest integer pixel rectangle covering the box: `(x0, y0, x1, y1)`
    /// with exclusive upper bounds, clamped to the image.
    pub fn pixel_bounds(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let clampi = |v: T, hi: usize| -> usize {
            let v = v.to_f64_lossy();
            if v <= 0.0 {
                0
            } else {
                (v as usize).min(hi)
            }
        };
        let x0 = clampi(self.x0.floor(), width.saturating_sub(1));
        let y0 = clampi(self.y0.floor(), height.saturating_sub(1));
        let x1 = clampi(self.x1.ceil(), width).max(x0 + 1);
        let y1 = clampi(self.y1.ceil(), height).max(y0 + 1);
        (x0, y0, x1, y1)
    }
}

/// Ground-truth region box: the landmark extremes grown by `pad` pixels on
/// every side, clamped to the image.
pub fn make_gt_box<T: Scalar>(
    points: &[Point2<T>],
    pad: T,
    image_size: (usize, usize),
) -> Result<BoundingBox<T>> {
    if points.is_empty() {
        return Err(Error::Empty("landmarks"));
    }
    if pad < T::zero() || !pad.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "padding must be >= 0, got {pad}"
        )));
    }
    let (mut min_x, mut min_y) = (T::infinity(), T::infinity());
    let (mut max_x, mut max_y) = (T::neg_infinity(), T::neg_infinity());
    for p in points {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
        max_x = max_x.max(p.x);
        max_y = max_y.max(p.y);
    }
    let unclamped = BoundingBox {
        x0: min_x - pad,
        y0: min_y - pad,
        x1: max_x + pad,
        y1: max_y + pad,
    };
    if !(unclamped.x0 < unclamped.x1 && unclamped.y0 < unclamped.y1) {
        return Err(Error::DegenerateBox(
            "landmark extremes span no area and padding is zero".into(),
        ));
    }
    let (height, width) = image_size;
    unclamped.clamp_to(height, width)
}

/// Maps crop-space coordinates (after resizing) back to the original image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionTransform<T> {
    pub crop_origin: Point2<T>,
    /// Resized pixels per original pixel.
    pub scale: T,
    /// `(height, width)` of the resized crop.
    pub resized_size: (usize, usize),
}

impl<T: Scalar> RegionTransform<T> {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop_origin: Point2::new(T::zero(), T::zero()),
            scale: T::one(),
            resized_size: (height, width),
        }
    }

    pub fn to_crop(&self, p: &Point2<T>) -> Point2<T> {
        Point2::new(
            (p.x - self.crop_origin.x) * self.scale,
            (p.y - self.crop_origin.y) * self.scale,
        )
    }

    pub fn to_original(&self, p: &Point2<T>) -> Point2<T> {
        Point2::new(
            self.crop_origin.x + p.x / self.scale,
            self.crop_origin.y + p.y / self.scale,
        )
    }
}

/// Output size and scale for resizing a `crop_h x crop_w` crop to
/// `target_height`, keeping its aspect ratio.
///
/// The width is rounded half away from zero and never drops below one pixel.
pub fn resized_dims(
    crop_h: usize,
    crop_w: usize,
    target_height: usize,
) -> Result<(usize, usize, f64)> {
    if crop_h == 0 || crop_w == 0 || target_height == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {crop_h}x{crop_w} crop to height {target_height}"
        )));
    }
    let scale = target_height as f64 / crop_h as f64;
    let width = ((crop_w as f64 * scale).round() as usize).max(1);
    Ok((target_height, width, scale))
}

pub fn remap_coords<T: Scalar>(
    coords: &[Point2<T>],
    transform: &RegionTransform<T>,
) -> Vec<Point2<T>> {
    coords.iter().map(|p| transform.to_original(p)).collect()
}

pub fn forward_map_coords<T: Scalar>(
    coords: &[Point2<T>],
    transform: &RegionTransform<T>,
) -> Vec<Point2<T>> {
    coords.iter().map(|p| transform.to_crop(p)).collect()
}
