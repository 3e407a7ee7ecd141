//! Network-ready crops of annotated records.

use anyhow::{Context, Result};
use cephalo_core::geometry::{forward_map_coords, make_gt_box, Point2};
use cephalo_core::imageops::to_scalar;
use cephalo_core::region::{apply_fallback, crop_box, FallbackMode, RegionPolicy, RegionSource};
use cephalo_core::{Record, Transform};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// How training and validation crops are cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CropMode {
    /// Landmark extremes padded by `pad` pixels.
    GroundTruth { pad: f64 },
    /// The deterministic full-image preprocessing.
    Fallback { mode: FallbackMode },
}

/// A resized crop with its landmarks in crop pixels.
#[derive(Debug, Clone)]
pub struct CropSample {
    pub image_id: String,
    pub pixels: Array2<f32>,
    pub coords: Vec<Point2<f32>>,
    pub transform: Transform,
    /// Ground truth in original pixels.
    pub gt: Vec<Point2<f64>>,
    pub spacing: f64,
}

pub fn crop_record(record: &Record, mode: CropMode, policy: &RegionPolicy) -> Result<CropSample> {
    let id = &record.image_id;
    let lm = record
        .landmarks
        .as_ref()
        .with_context(|| format!("'{id}' has no landmarks"))?;
    let image: Array2<f64> = to_scalar(&*record.pixels()?);
    let crop = match mode {
        CropMode::GroundTruth { pad } => {
            let bbox = make_gt_box(lm.points(), pad, image.dim())
                .with_context(|| format!("ground-truth box for '{id}'"))?;
            crop_box(
                &image,
                &bbox,
                policy.target_height,
                RegionSource::GroundTruth,
            )?
        }
        CropMode::Fallback { mode } => apply_fallback(&image, mode, policy)
            .with_context(|| format!("fallback 'none' cannot crop '{id}'"))??,
    };
    let coords = forward_map_coords(lm.points(), &crop.transform)
        .into_iter()
        .map(|p| p.cast::<f32>())
        .collect();
    Ok(CropSample {
        image_id: id.clone(),
        pixels: crop.pixels.mapv(|v| v as f32),
        coords,
        transform: crop.transform,
        gt: lm.points().to_vec(),
        spacing: record.spacing,
    })
}

pub fn crop_records(
    records: &[&Record],
    mode: CropMode,
    policy: &RegionPolicy,
) -> Result<Vec<CropSample>> {
    records
        .iter()
        .map(|r| crop_record(r, mode, policy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_records, SynthOptions};
    use cephalo_core::geometry::remap_coords;

    #[test]
    fn gt_crop_maps_landmarks_back() {
        let recs = synth_records(&SynthOptions {
            n_images: 1,
            ..Default::default()
        })
        .unwrap();
        let policy = RegionPolicy {
            target_height: 128,
            ..Default::default()
        };
        let c = crop_record(&recs[0], CropMode::GroundTruth { pad: 16.0 }, &policy).unwrap();
        assert_eq!(c.pixels.nrows(), 128);
        let (h, w) = c.pixels.dim();
        assert!(c
            .coords
            .iter()
            .all(|p| p.x >= 0.0 && p.y >= 0.0 && (p.x as usize) < w && (p.y as usize) < h));
        let crop64: Vec<Point2<f64>> = c.coords.iter().map(|p| p.cast()).collect();
        for (a, b) in remap_coords(&crop64, &c.transform).iter().zip(&c.gt) {
            assert!(a.distance(b) < 1e-3);
        }
    }

    #[test]
    fn fallback_crop() {
        let recs = synth_records(&SynthOptions {
            n_images: 1,
            ..Default::default()
        })
        .unwrap();
        let policy = RegionPolicy {
            target_height: 100,
            ..Default::default()
        };
        let c = crop_record(
            &recs[0],
            CropMode::Fallback {
                mode: FallbackMode::PadResize,
            },
            &policy,
        )
        .unwrap();
        assert_eq!(c.pixels.nrows(), 100);
        assert!(crop_record(
            &recs[0],
            CropMode::Fallback {
                mode: FallbackMode::None
            },
            &policy
        )
        .is_err());
    }
}
