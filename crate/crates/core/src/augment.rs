//! Training-time augmentation: coordinate-consistent geometric warps,
//! photometric changes, and axis-aligned X-ray artefact bands.
//!
//! Sampling order is geometric, then photometric, then artefact.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::imageops::{bilinear, gaussian_blur};
use crate::scalar::Scalar;

const MAX_INTENSITY: f64 = 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub enabled: bool,
    /// Application probability of each conventional op without its own rate.
    pub op_probability: f64,
    pub rotation_deg: f64,
    /// Maximum `(horizontal, vertical)` shift in pixels.
    pub translate_px: (f64, f64),
    pub scale: (f64, f64),
    /// Rate of independent x/y scaling.
    pub skewed_scale_rate: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub value_multiply: (f64, f64),
    pub gamma: (f64, f64),
    pub invert_rate: f64,
    pub blur_rate: f64,
    pub blur_sigma: (f64, f64),
    pub cutout_count: usize,
    /// Cutout side length as a fraction of the image side.
    pub cutout_frac: (f64, f64),
    pub artefact_rate: f64,
    /// Standard deviation of the additive band noise, intensity units.
    pub artefact_noise_sigma: f64,
    pub artefact_mult_range: (f64, f64),
    pub artefact_band_sizes: Vec<usize>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            op_probability: 0.5,
            rotation_deg: 5.0,
            translate_px: (30.0, 20.0),
            scale: (0.875, 1.125),
            skewed_scale_rate: 0.3,
            elastic_alpha: 400.0,
            elastic_sigma: 30.0,
            value_multiply: (0.4, 1.6),
            gamma: (0.3, 2.0),
            invert_rate: 0.1,
            blur_rate: 0.1,
            blur_sigma: (0.5, 1.5),
            cutout_count: 1,
            cutout_frac: (0.04, 0.3),
            artefact_rate: 0.9,
            artefact_noise_sigma: 15.0,
            artefact_mult_range: (0.5, 1.5),
            artefact_band_sizes: vec![25, 50, 75, 100, 125],
        }
    }
}

impl AugmentationConfig {
    /// A config whose every op is the identity.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("op_probability", self.op_probability),
            ("skewed_scale_rate", self.skewed_scale_rate),
            ("invert_rate", self.invert_rate),
            ("blur_rate", self.blur_rate),
            ("artefact_rate", self.artefact_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {r} outside [0, 1]"
                )));
            }
        }
        let ranges = [
            ("scale", self.scale),
            ("value_multiply", self.value_multiply),
            ("gamma", self.gamma),
            ("blur_sigma", self.blur_sigma),
            ("cutout_frac", self.cutout_frac),
            ("artefact_mult_range", self.artefact_mult_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || lo < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} range ({lo}, {hi}) is not ordered"
                )));
            }
        }
        if self.artefact_band_sizes.is_empty() || self.artefact_band_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "artefact band sizes must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn clip<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::c(MAX_INTENSITY))
}

/// Row-major 2x3 affine map on `(x, y)` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    /// `translate(centre + shift) * rotate * scale * translate(-centre)`.
    pub fn about_centre(
        centre: (f64, f64),
        angle_deg: f64,
        sx: f64,
        sy: f64,
        shift: (f64, f64),
    ) -> Self {
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let a = [[cos * sx, -sin * sy], [sin * sx, cos * sy]];
        let (cx, cy) = centre;
        let tx = cx + shift.0 - (a[0][0] * cx + a[0][1] * cy);
        let ty = cy + shift.1 - (a[1][0] * cx + a[1][1] * cy);
        Affine([[a[0][0], a[0][1], tx], [a[1][0], a[1][1], ty]])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Option<Affine> {
        let m = &self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return None;
        }
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Some(Affine([
            [a, b, -(a * m[0][2] + b * m[1][2])],
            [c, d, -(c * m[0][2] + d * m[1][2])],
        ]))
    }

    pub fn is_identity(&self) -> bool {
        self.0 == Self::IDENTITY.0
    }
}

/// Output of a geometric augmentation. `valid[i]` is false when landmark `i`
/// left the frame.
#[derive(Debug, Clone)]
pub struct Warped<T> {
    pub image: Array2<T>,
    pub coords: Vec<Point2<T>>,
    pub valid: Vec<bool>,
    pub affine: Affine,
    pub elastic: bool,
}

fn in_frame<T: Scalar>(p: &Point2<T>, h: usize, w: usize) -> bool {
    p.is_finite()
        && p.x >= T::zero()
        && p.y >= T::zero()
        && p.x < T::from_usize_lossy(w)
        && p.y < T::from_usize_lossy(h)
}

/// Warps `image` by `affine` (bilinear, zero fill) and maps `coords` by the
/// same matrix.
pub fn apply_affine<T: Scalar>(
    image: &Array2<T>,
    coords: &[Point2<T>],
    affine: &Affine,
) -> Result<(Array2<T>, Vec<Point2<T>>)> {
    if affine.is_identity() {
        return Ok((image.clone(), coords.to_vec()));
    }
    let inv = affine
        .inverse()
        .ok_or_else(|| Error::InvalidArgument("singular affine transform".into()))?;
    let out = Array2::from_shape_fn(image.dim(), |(y, x)| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        bilinear(image, T::c(sx), T::c(sy), T::zero())
    });
    let coords = coords
        .iter()
        .map(|p| {
            let (x, y) = affine.apply(p.x.to_f64_lossy(), p.y.to_f64_lossy());
            Point2::new(T::c(x), T::c(y))
        })
        .collect();
    Ok((out, coords))
}

/// Random displacement field: uniform noise smoothed by `sigma`, scaled by
/// `alpha`. Returns `(dx, dy)`.
pub fn elastic_field<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> (Array2<f64>, Array2<f64>) {
    let mut field = || {
        let noise = Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0..=1.0));
        gaussian_blur(&noise, sigma).mapv(|v| v * alpha)
    };
    let dx = field();
    let dy = field();
    (dx, dy)
}

/// Output pixel `p` reads the input at `p + d(p)`; a landmark at `q` moves to
/// `q - d(q)`.
pub fn apply_displacement<T: Scalar>(
    image: &Array2<T>,
    coords: &[Point2<T>],
    dx: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<T>, Vec<Point2<T>>) {
    let out = Array2::from_shape_fn(image.dim(), |(y, x)| {
        bilinear(
            image,
            T::c(x as f64 + dx[[y, x]]),
            T::c(y as f64 + dy[[y, x]]),
            T::zero(),
        )
    });
    let coords = coords
        .iter()
        .map(|p| {
            let ddx = bilinear(dx, p.x.to_f64_lossy(), p.y.to_f64_lossy(), 0.0);
            let ddy = bilinear(dy, p.x.to_f64_lossy(), p.y.to_f64_lossy(), 0.0);
            Point2::new(p.x - T::c(ddx), p.y - T::c(ddy))
        })
        .collect();
    (out, coords)
}

/// Samples and applies rotation, translation, scale, skewed scale and
/// elastic deformation.
pub fn apply_geometric<T: Scalar, R: Rng + ?Sized>(
    image: &Array2<T>,
    coords: &[Point2<T>],
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<Warped<T>> {
    let (h, w) = image.dim();
    let p = config.op_probability;
    let angle = if rng.random_bool(p) {
        uniform(rng, (-config.rotation_deg, config.rotation_deg))
    } else {
        0.0
    };
    let shift = if rng.random_bool(p) {
        (
            uniform(rng, (-config.translate_px.0, config.translate_px.0)),
            uniform(rng, (-config.translate_px.1, config.translate_px.1)),
        )
    } else {
        (0.0, 0.0)
    };
    let (mut sx, mut sy) = (1.0, 1.0);
    if rng.random_bool(p) {
        let s = uniform(rng, config.scale);
        sx *= s;
        sy *= s;
    }
    if rng.random_bool(config.skewed_scale_rate) {
        sx *= uniform(rng, config.scale);
        sy *= uniform(rng, config.scale);
    }
    let centre = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut affine = Affine::about_centre(centre, angle, sx, sy, shift);
    if angle == 0.0 && sx == 1.0 && sy == 1.0 && shift == (0.0, 0.0) {
        affine = Affine::IDENTITY;
    }
    let (mut img, mut pts) = apply_affine(image, coords, &affine)?;
    let elastic = config.elastic_alpha > 0.0 && rng.random_bool(p);
    if elastic {
        let (dx, dy) = elastic_field(h, w, config.elastic_alpha, config.elastic_sigma, rng);
        (img, pts) = apply_displacement(&img, &pts, &dx, &dy);
    }
    let valid = pts.iter().map(|q| in_frame(q, h, w)).collect();
    Ok(Warped {
        image: img,
        coords: pts,
        valid,
        affine,
        elastic,
    })
}

pub fn invert<T: Scalar>(image: &mut Array2<T>) {
    image.mapv_inplace(|v| T::c(MAX_INTENSITY) - v);
}

pub fn gamma_contrast<T: Scalar>(image: &mut Array2<T>, gamma: f64) {
    let g = T::c(gamma);
    let m = T::c(MAX_INTENSITY);
    image.mapv_inplace(|v| m * (v.max(T::zero()) / m).powf(g));
}

/// Zeroes the `height x width` rectangle at `(x0, y0)`.
pub fn cutout<T: Scalar>(image: &mut Array2<T>, x0: usize, y0: usize, width: usize, height: usize) {
    let (h, w) = image.dim();
    let (x1, y1) = ((x0 + width).min(w), (y0 + height).min(h));
    image
        .slice_mut(s![y0.min(h)..y1, x0.min(w)..x1])
        .fill(T::zero());
}

/// Value multiply, gamma, inversion, blur and cutout, clipped to `[0, 255]`
/// once at the end. Coordinates are not affected.
pub fn apply_photometric<T: Scalar, R: Rng + ?Sized>(
    image: &Array2<T>,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Array2<T> {
    let p = config.op_probability;
    let mut out = image.clone();
    if rng.random_bool(p) {
        let f = T::c(uniform(rng, config.value_multiply));
        out.mapv_inplace(|v| v * f);
    }
    if rng.random_bool(p) {
        gamma_contrast(&mut out, uniform(rng, config.gamma));
    }
    if rng.random_bool(config.invert_rate) {
        invert(&mut out);
    }
    if rng.random_bool(config.blur_rate) {
        out = gaussian_blur(&out, uniform(rng, config.blur_sigma));
    }
    if config.cutout_count > 0 && rng.random_bool(p) {
        let (h, w) = out.dim();
        for _ in 0..config.cutout_count {
            let frac = uniform(rng, config.cutout_frac);
            let ch = ((frac * h as f64).round() as usize).clamp(1, h);
            let cw = ((frac * w as f64).round() as usize).clamp(1, w);
            let y0 = rng.random_range(0..=h - ch);
            let x0 = rng.random_range(0..=w - cw);
            cutout(&mut out, x0, y0, cw, ch);
        }
    }
    out.mapv_inplace(clip);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandOrientation {
    /// A column range spanning the full height.
    Vertical,
    /// A row range spanning the full width.
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtefactMode {
    /// Per-pixel `N(0, sigma)` noise.
    AdditiveNoise {
        sigma: f64,
    },
    Multiplicative {
        factor: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtefactBand {
    pub orientation: BandOrientation,
    pub start: usize,
    pub size: usize,
    pub mode: ArtefactMode,
}

impl ArtefactBand {
    /// `(rows, cols)` ranges covered by the band.
    pub fn extent(&self, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        match self.orientation {
            BandOrientation::Vertical => (0..h, self.start.min(w)..(self.start + self.size).min(w)),
            BandOrientation::Horizontal => {
                (self.start.min(h)..(self.start + self.size).min(h), 0..w)
            }
        }
    }
}

/// Applies `band` in place, clipping only the pixels inside it.
pub fn apply_artefact_band<T: Scalar, R: Rng + ?Sized>(
    image: &mut Array2<T>,
    band: &ArtefactBand,
    rng: &mut R,
) {
    let (h, w) = image.dim();
    let (rows, cols) = band.extent(h, w);
    let mut region = image.slice_mut(s![rows, cols]);
    match band.mode {
        ArtefactMode::AdditiveNoise { sigma } => {
            let normal =
                Normal::new(0.0, sigma.max(0.0)).expect("sigma is finite and non-negative");
            region.mapv_inplace(|v| clip(v + T::c(normal.sample(rng))));
        }
        ArtefactMode::Multiplicative { factor } => {
            if factor != 1.0 {
                let f = T::c(factor);
                region.mapv_inplace(|v| clip(v * f));
            }
        }
    }
}

/// With probability `artefact_rate`, corrupts one random horizontal or
/// vertical band. Returns the band that was applied, if any.
pub fn simulate_xray_artefact<T: Scalar, R: Rng + ?Sized>(
    image: &Array2<T>,
    config: &AugmentationConfig,
    rng: &mut R,
) -> (Array2<T>, Option<ArtefactBand>) {
    let mut out = image.clone();
    if config.artefact_band_sizes.is_empty() || !rng.random_bool(config.artefact_rate) {
        return (out, None);
    }
    let (h, w) = image.dim();
    let orientation = if rng.random_bool(0.5) {
        BandOrientation::Vertical
    } else {
        BandOrientation::Horizontal
    };
    let extent = match orientation {
        BandOrientation::Vertical => w,
        BandOrientation::Horizontal => h,
    };
    let size = config.artefact_band_sizes[rng.random_range(0..config.artefact_band_sizes.len())];
    let start = if size >= extent {
        0
    } else {
        rng.random_range(0..=extent - size)
    };
    let mode = if rng.random_bool(0.5) {
        ArtefactMode::AdditiveNoise {
            sigma: config.artefact_noise_sigma,
        }
    } else {
        ArtefactMode::Multiplicative {
            factor: uniform(rng, config.artefact_mult_range),
        }
    };
    let band = ArtefactBand {
        orientation,
        start,
        size,
        mode,
    };
    apply_artefact_band(&mut out, &band, rng);
    (out, Some(band))
}

/// Full chain for one training sample. Disabled configs return the inputs
/// unchanged with every in-frame landmark valid.
pub fn augment_sample<T: Scalar, R: Rng + ?Sized>(
    image: &Array2<T>,
    coords: &[Point2<T>],
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Array2<T>, Vec<Point2<T>>, Vec<bool>)> {
    let (h, w) = image.dim();
    if !config.enabled {
        let valid = coords.iter().map(|p| in_frame(p, h, w)).collect();
        return Ok((image.clone(), coords.to_vec(), valid));
    }
    let warped = apply_geometric(image, coords, config, rng)?;
    let img = apply_photometric(&warped.image, config, rng);
    let (img, _) = simulate_xray_artefact(&img, config, rng);
    Ok((img, warped.coords, warped.valid))
}
