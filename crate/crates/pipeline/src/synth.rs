//! Synthetic lateral-cephalogram stand-ins: a fixed 53-point anatomical
//! template placed with random similarity jitter inside a textured skull
//! silhouette. Used by the smoke tests and the `synth` subcommand.

use std::path::Path;

use anyhow::Result;
use cephalo_core::dataset::{write_annotations, AnnotationRow, ImageRecord};
use cephalo_core::geometry::Point2;
use cephalo_core::imageops::{gaussian_blur, save_gray};
use cephalo_core::landmarks::{LandmarkGroup, LandmarkLayout, LandmarkSet};
use cephalo_core::{Record, N_LANDMARKS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Millimetres per pixel written to the annotation file.
    pub spacing: f64,
    /// Face-region height as a fraction of the image height.
    pub face_fraction: (f64, f64),
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_images: 8,
            height: 320,
            width: 288,
            spacing: 0.1,
            face_fraction: (0.7, 0.85),
            seed: 0,
        }
    }
}

/// Landmark positions in unit face-box coordinates, `x` towards the face.
pub fn template() -> Vec<Point2<f64>> {
    let layout = LandmarkLayout::standard();
    let mut out = Vec::with_capacity(N_LANDMARKS);
    let mut counts = [0usize; 5];
    for g in layout.groups() {
        let gi = LandmarkGroup::ALL.iter().position(|x| x == g).unwrap_or(0);
        let i = counts[gi];
        counts[gi] += 1;
        let t = i as f64 / (g.cardinality().max(2) - 1) as f64;
        let p = match g {
            LandmarkGroup::SoftTissue => Point2::new(
                0.86 + 0.07 * (std::f64::consts::TAU * t).sin(),
                0.12 + 0.8 * t,
            ),
            LandmarkGroup::Tooth => {
                Point2::new(0.70 + 0.08 * (i % 3) as f64, 0.60 + 0.06 * (i / 3) as f64)
            }
            LandmarkGroup::Skull => {
                let a = std::f64::consts::PI * (0.15 + 1.6 * t);
                Point2::new(0.45 + 0.3 * a.cos(), 0.42 - 0.3 * a.sin())
            }
            LandmarkGroup::CervicalSpine => {
                Point2::new(0.16 + 0.05 * (i % 2) as f64 + 0.02 * t, 0.55 + 0.38 * t)
            }
            LandmarkGroup::Ruler => Point2::new(0.93, 0.02 + 0.1 * t),
        };
        out.push(p);
    }
    out
}

fn fill_disc(img: &mut Array2<f64>, c: Point2<f64>, r: f64, v: f64) {
    let (h, w) = img.dim();
    let (y0, y1) = (
        (c.y - r).floor().max(0.0) as usize,
        ((c.y + r).ceil() as usize).min(h - 1),
    );
    let (x0, x1) = (
        (c.x - r).floor().max(0.0) as usize,
        ((c.x + r).ceil() as usize).min(w - 1),
    );
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (x as f64 - c.x).hypot(y as f64 - c.y) <= r {
                img[[y, x]] = v;
            }
        }
    }
}

/// One synthetic image and its landmarks (original pixels).
pub fn synth_image(opts: &SynthOptions, rng: &mut ChaCha8Rng) -> (Array2<u8>, Vec<Point2<f64>>) {
    let (h, w) = (opts.height, opts.width);
    let hb = h as f64 * rng.random_range(opts.face_fraction.0..=opts.face_fraction.1);
    let wb = (hb * rng.random_range(0.75..0.9)).min(w as f64 * 0.95);
    let x0 = rng.random_range(0.0..=(w as f64 - wb).max(0.0));
    let y0 = rng.random_range(0.0..=(h as f64 - hb).max(0.0));
    let angle = rng.random_range(-4f64..4.0).to_radians();
    let (sa, ca) = angle.sin_cos();
    let centre = Point2::new(x0 + wb / 2.0, y0 + hb / 2.0);
    let jitter = 0.01 * hb;
    let place = |u: f64, v: f64| {
        let (dx, dy) = ((u - 0.5) * wb, (v - 0.5) * hb);
        Point2::new(centre.x + ca * dx - sa * dy, centre.y + sa * dx + ca * dy)
    };
    let points: Vec<Point2<f64>> = template()
        .into_iter()
        .map(|p| {
            let q = place(p.x, p.y);
            let q = Point2::new(
                q.x + rng.random_range(-jitter..jitter),
                q.y + rng.random_range(-jitter..jitter),
            );
            Point2::new(
                q.x.clamp(1.0, w as f64 - 2.0),
                q.y.clamp(1.0, h as f64 - 2.0),
            )
        })
        .collect();

    let mut img = Array2::from_shape_fn((h, w), |(y, x)| {
        20.0 + 10.0 * ((x as f64 / 17.0).sin() + (y as f64 / 23.0).cos())
    });
    let skull = place(0.45, 0.42);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (
                (x as f64 - skull.x) / (0.36 * wb),
                (y as f64 - skull.y) / (0.36 * hb),
            );
            if dx * dx + dy * dy <= 1.0 {
                img[[y, x]] = 70.0 + 15.0 * ((x as f64 / 9.0).sin() * (y as f64 / 11.0).sin());
            }
        }
    }
    let r = (hb / 110.0).max(1.5);
    for (l, p) in points.iter().enumerate() {
        fill_disc(&mut img, *p, r, 140.0 + 16.0 * (l % 7) as f64);
    }
    let img = gaussian_blur(&img, 0.8);
    let pixels = img.mapv(|v| (v + rng.random_range(-3.0..3.0)).round().clamp(0.0, 255.0) as u8);
    (pixels, points)
}

/// In-memory records named `synth_000`, `synth_001`, ...
pub fn synth_records(opts: &SynthOptions) -> Result<Vec<Record>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.n_images)
        .map(|i| {
            let (pixels, points) = synth_image(opts, &mut rng);
            let id = format!("synth_{i:03}");
            let lm = LandmarkSet::with_id(&id, points)?;
            Ok(ImageRecord::in_memory(id, pixels, opts.spacing, Some(lm))?)
        })
        .collect()
}

/// Writes `<id>.png` files and `annotations.csv` under `dir`.
pub fn write_synthetic_dataset(dir: &Path, opts: &SynthOptions) -> Result<Vec<Record>> {
    std::fs::create_dir_all(dir)?;
    let records = synth_records(opts)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        save_gray(
            &r.pixels()?.mapv(|v| v as f64),
            &dir.join(format!("{}.png", r.image_id)),
        )?;
        rows.push(AnnotationRow {
            image_id: r.image_id.clone(),
            spacing: Some(r.spacing),
            points: r
                .landmarks
                .as_ref()
                .map(|l| l.points().to_vec())
                .unwrap_or_default(),
        });
    }
    write_annotations(&dir.join("annotations.csv"), &rows)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_inside_unit_box() {
        let t = template();
        assert_eq!(t.len(), N_LANDMARKS);
        assert!(t
            .iter()
            .all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
    }

    #[test]
    fn records_are_deterministic_and_valid() {
        let opts = SynthOptions {
            n_images: 2,
            ..Default::default()
        };
        let a = synth_records(&opts).unwrap();
        let b = synth_records(&opts).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].pixels().unwrap(), b[1].pixels().unwrap());
        assert_eq!(a[1].landmarks, b[1].landmarks);
        assert_ne!(a[0].landmarks, a[1].landmarks);
    }
}
