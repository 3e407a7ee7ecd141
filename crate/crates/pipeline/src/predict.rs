//! Inference: region extraction, per-model heatmaps, top-K decoding,
//! remapping and coordinate ensembling.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use cephalo_core::dataset::{write_submission, AnnotationRow};
use cephalo_core::decode::{decode_topk_weighted, ensemble_coords, TopKWeighting};
use cephalo_core::geometry::{remap_coords, Point2};
use cephalo_core::imageops::to_scalar;
use cephalo_core::region::{extract_region, RegionDetector, RegionPolicy, RegionSource};
use cephalo_core::{Record, Transform};
use cephalo_net::detector::AnchorDetector;
use cephalo_net::train::{batch_from_planes, tensor_to_array4};
use cephalo_net::{LandmarkModel, Mode};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Per-model and ensembled landmarks of one image, original pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub image_id: String,
    pub per_model_coords: Vec<Vec<Point2<f64>>>,
    pub ensembled_coords: Vec<Point2<f64>>,
    pub region_source: RegionSource,
    pub transform: Transform,
}

/// Top-K decoded coordinates of every heatmap plane, crop pixels.
pub fn model_crop_coords(
    model: &LandmarkModel,
    pixels: &Array2<f32>,
    top_k: usize,
    weighting: TopKWeighting,
) -> Result<Vec<Point2<f64>>> {
    let x = batch_from_planes(&[pixels], model.dtype())?;
    let y = tensor_to_array4(&model.forward(&x, &mut Mode::Eval)?)?;
    let mut out = Vec::with_capacity(y.dim().1);
    for plane in y.index_axis(ndarray::Axis(0), 0).outer_iter() {
        let plane64 = plane.mapv(f64::from);
        out.push(decode_topk_weighted(plane64.view(), top_k, weighting)?);
    }
    Ok(out)
}

/// Ensemble prediction for one prepared crop.
pub fn bundle_for_crop(
    models: &[&LandmarkModel],
    top_k: usize,
    weighting: TopKWeighting,
    image_id: &str,
    pixels: &Array2<f32>,
    transform: &Transform,
    source: RegionSource,
) -> Result<PredictionBundle> {
    let per_model_coords = models
        .iter()
        .map(|m| {
            Ok(remap_coords(
                &model_crop_coords(m, pixels, top_k, weighting)?,
                transform,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let ensembled_coords = ensemble_coords(&per_model_coords)?;
    Ok(PredictionBundle {
        image_id: image_id.to_string(),
        per_model_coords,
        ensembled_coords,
        region_source: source,
        transform: *transform,
    })
}

/// One or more heatmap models applied as an ensemble.
pub struct Predictor {
    pub models: Vec<LandmarkModel>,
    pub top_k: usize,
    pub weighting: TopKWeighting,
}

impl Predictor {
    pub fn new(models: Vec<LandmarkModel>, top_k: usize, weighting: TopKWeighting) -> Result<Self> {
        if models.is_empty() {
            bail!("at least one checkpoint is required");
        }
        Ok(Self {
            models,
            top_k,
            weighting,
        })
    }

    pub fn load(checkpoints: &[PathBuf], top_k: usize, weighting: TopKWeighting) -> Result<Self> {
        let models = checkpoints
            .iter()
            .map(|p| {
                LandmarkModel::load_checkpoint(p, DType::F32)
                    .map(|(m, _)| m)
                    .with_context(|| format!("loading {}", p.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(models, top_k, weighting)
    }

    /// Decodes every model on a prepared crop and maps back through `transform`.
    pub fn predict_crop(
        &self,
        image_id: &str,
        pixels: &Array2<f32>,
        transform: &Transform,
        source: RegionSource,
    ) -> Result<PredictionBundle> {
        let models: Vec<&LandmarkModel> = self.models.iter().collect();
        bundle_for_crop(
            &models,
            self.top_k,
            self.weighting,
            image_id,
            pixels,
            transform,
            source,
        )
    }

    /// Full chain on one record's pixels.
    pub fn predict_record(
        &self,
        record: &Record,
        detector: Option<&AnchorDetector>,
        policy: &RegionPolicy,
    ) -> Result<PredictionBundle> {
        let image: Array2<f32> = to_scalar(&*record.pixels()?);
        let det = detector.map(|d| d as &dyn RegionDetector<f32>);
        let crop = extract_region(&record.image_id, &image, det, policy)?;
        let transform = Transform {
            crop_origin: crop.transform.crop_origin.cast(),
            scale: f64::from(crop.transform.scale),
            resized_size: crop.transform.resized_size,
        };
        self.predict_crop(&record.image_id, &crop.pixels, &transform, crop.source)
    }
}

/// Bundles for every record plus the ids that failed.
pub struct PredictOutcome {
    pub bundles: Vec<PredictionBundle>,
    pub failed: Vec<String>,
}

/// Predicts each record; failures are logged and skipped.
pub fn predict_records(
    predictor: &Predictor,
    records: &[Record],
    detector: Option<&AnchorDetector>,
    policy: &RegionPolicy,
) -> PredictOutcome {
    let mut out = PredictOutcome {
        bundles: Vec::with_capacity(records.len()),
        failed: Vec::new(),
    };
    for r in records {
        match predictor.predict_record(r, detector, policy) {
            Ok(b) => out.bundles.push(b),
            Err(e) => {
                log::error!("skipping '{}': {e:#}", r.image_id);
                out.failed.push(r.image_id.clone());
            }
        }
    }
    out
}

pub fn submission_rows(bundles: &[PredictionBundle]) -> Vec<AnnotationRow<f64>> {
    bundles
        .iter()
        .map(|b| AnnotationRow {
            image_id: b.image_id.clone(),
            spacing: None,
            points: b.ensembled_coords.clone(),
        })
        .collect()
}

/// Writes `predictions.json` and `submission.csv` under `dir`.
pub fn write_outputs(dir: &Path, bundles: &[PredictionBundle]) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join("predictions.json");
    std::fs::write(&json, serde_json::to_string_pretty(bundles)?)?;
    let csv = dir.join("submission.csv");
    write_submission(&csv, &submission_rows(bundles))?;
    Ok((json, csv))
}

/// Records for every `*.<ext>` file in `dir`, sorted by id. Files whose
/// header cannot be read are logged and returned as failures.
pub fn scan_images(dir: &Path, ext: &str) -> Result<(Vec<Record>, Vec<String>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    paths.sort();
    let (mut records, mut failed) = (Vec::new(), Vec::new());
    for p in paths {
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        // spacing is irrelevant for prediction
        match Record::from_file(id.clone(), p, 1.0, None) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::error!("skipping '{id}': {e}");
                failed.push(id);
            }
        }
    }
    Ok((records, failed))
}
