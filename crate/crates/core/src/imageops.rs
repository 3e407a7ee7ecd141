//! Grayscale pixel-plane helpers: loading, cropping, padding, resampling and
//! Gaussian filtering. Planes are `(height, width)` arrays.

use std::path::Path;

use image::DynamicImage;
use ndarray::{s, Array2};

use crate::error::Result;
use crate::scalar::Scalar;

/// Loads an image as a single 8-bit channel. Colour sources are averaged
/// across their RGB channels.
pub fn load_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?;
    Ok(to_gray_plane(&img))
}

pub fn to_gray_plane(img: &DynamicImage) -> Array2<u8> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            Array2::from_shape_vec((h, w), buf.as_raw().clone()).expect("luma buffer matches dims")
        }
        other => {
            let rgb = other.to_rgb8();
            let mut out = Array2::<u8>::zeros((h, w));
            for (x, y, px) in rgb.enumerate_pixels() {
                let sum = px.0.iter().map(|&c| c as u32).sum::<u32>();
                out[[y as usize, x as usize]] = ((sum + 1) / 3) as u8;
            }
            out
        }
    }
}

pub fn save_gray<T: Scalar>(plane: &Array2<T>, path: &Path) -> Result<()> {
    let (h, w) = plane.dim();
    let buf: Vec<u8> = plane
        .iter()
        .map(|v| v.to_f64_lossy().round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dims");
    img.save(path)?;
    Ok(())
}

pub fn to_scalar<T: Scalar>(plane: &Array2<u8>) -> Array2<T> {
    plane.mapv(|v| T::from_u8(v).expect("u8 fits"))
}

/// Copies `[y0, y1) x [x0, x1)` out of `plane`.
pub fn crop<T: Clone>(plane: &Array2<T>, x0: usize, y0: usize, x1: usize, y1: usize) -> Array2<T> {
    plane.slice(s![y0..y1, x0..x1]).to_owned()
}

/// Zero-pads `plane` on the bottom and right up to `(height, width)`. Larger
/// planes are returned unchanged along that axis.
pub fn pad_bottom_right<T: Clone + num_traits::Zero>(
    plane: &Array2<T>,
    height: usize,
    width: usize,
) -> Array2<T> {
    let (h, w) = plane.dim();
    let mut out = Array2::zeros((height.max(h), width.max(w)));
    out.slice_mut(s![..h, ..w]).assign(plane);
    out
}

/// Bilinear sample at `(x, y)`; positions outside the plane read as `fill`.
pub fn bilinear<T: Scalar>(plane: &Array2<T>, x: T, y: T, fill: T) -> T {
    let (h, w) = plane.dim();
    let fx = x.floor();
    let fy = y.floor();
    let tx = x - fx;
    let ty = y - fy;
    let (ix, iy) = match (fx.to_i64(), fy.to_i64()) {
        (Some(a), Some(b)) => (a, b),
        _ => return fill,
    };
    let at = |xx: i64, yy: i64| -> T {
        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
            fill
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    if tx == T::zero() && ty == T::zero() {
        return at(ix, iy);
    }
    let top = at(ix, iy) * (T::one() - tx) + at(ix + 1, iy) * tx;
    let bottom = at(ix, iy + 1) * (T::one() - tx) + at(ix + 1, iy + 1) * tx;
    top * (T::one() - ty) + bottom * ty
}

/// Normalised 1D Gaussian taps for `sigma`, truncated at `4 sigma`.
/// `sigma == 0` yields the single tap `[1]`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur<T: Scalar>(plane: &Array2<T>, sigma: f64) -> Array2<T> {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let taps: Vec<T> = gaussian_kernel_1d(sigma).into_iter().map(T::c).collect();
    let r = (taps.len() / 2) as i64;
    let (h, w) = plane.dim();
    let mut tmp = Array2::<T>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, t) in taps.iter().enumerate() {
                let xx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += *t * plane[[y, xx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<T>::zeros((h, w));
    for y in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let yy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
            let src = tmp.row(yy);
            let mut dst = out.row_mut(y);
            dst.zip_mut_with(&src, |d, s| *d += *t * *s);
        }
    }
    out
}

/// Resamples `plane` so output pixel `(u, v)` reads the source at
/// `(u / scale, v / scale)`. Downscaling pre-filters with a Gaussian.
pub fn resize_scaled<T: Scalar>(
    plane: &Array2<T>,
    out_h: usize,
    out_w: usize,
    scale: f64,
) -> Array2<T> {
    let src = if scale < 1.0 {
        gaussian_blur(plane, 0.5 * (1.0 / scale - 1.0))
    } else {
        plane.clone()
    };
    let (h, w) = src.dim();
    let inv = 1.0 / scale;
    Array2::from_shape_fn((out_h, out_w), |(v, u)| {
        // clamp to the last source pixel so the right/bottom edge is not faded by zero fill
        let x = (u as f64 * inv).min((w - 1) as f64);
        let y = (v as f64 * inv).min((h - 1) as f64);
        bilinear(&src, T::c(x), T::c(y), T::zero())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised() {
        let k = gaussian_kernel_1d(1.0);
        assert_eq!(k.len(), 9);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(gaussian_kernel_1d(0.0), vec![1.0]);
    }

    #[test]
    fn blur_preserves_constant() {
        let p = Array2::<f64>::from_elem((12, 9), 7.0);
        let b = gaussian_blur(&p, 1.3);
        assert!(b.iter().all(|v| (v - 7.0).abs() < 1e-9));
    }

    #[test]
    fn identity_resize() {
        let p = Array2::from_shape_fn((5, 4), |(y, x)| (y * 4 + x) as f32);
        assert_eq!(resize_scaled(&p, 5, 4, 1.0), p);
    }

    #[test]
    fn gray_conversion_averages_channels() {
        let mut rgb = image::RgbImage::new(2, 1);
        rgb.put_pixel(0, 0, image::Rgb([30, 60, 90]));
        rgb.put_pixel(1, 0, image::Rgb([255, 255, 255]));
        let plane = to_gray_plane(&DynamicImage::ImageRgb8(rgb));
        assert_eq!(plane[[0, 0]], 60);
        assert_eq!(plane[[0, 1]], 255);
    }

    #[test]
    fn pad_and_crop() {
        let p = Array2::from_shape_fn((2, 3), |(y, x)| (y * 3 + x) as f32 + 1.0);
        let q = pad_bottom_right(&p, 4, 5);
        assert_eq!(q.dim(), (4, 5));
        assert_eq!(q[[1, 2]], 6.0);
        assert_eq!(q[[3, 4]], 0.0);
        assert_eq!(
            crop(&q, 1, 0, 3, 2),
            ndarray::arr2(&[[2.0, 3.0], [5.0, 6.0]])
        );
    }
}
