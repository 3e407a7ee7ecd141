//! Scoring prediction bundles against annotations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cephalo_core::metrics::{EvalReport, ImageEval};
use cephalo_core::{Record, Report};

use crate::predict::PredictionBundle;

pub fn load_bundles(path: &Path) -> Result<Vec<PredictionBundle>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Ensembled coordinates of each bundle scored against the record of the
/// same id. Bundles without an annotated record are an error.
pub fn evaluate_bundles(bundles: &[PredictionBundle], records: &[Record]) -> Result<Report> {
    if bundles.is_empty() {
        bail!("no predictions to evaluate");
    }
    let mut evals = Vec::with_capacity(bundles.len());
    for b in bundles {
        let rec = records
            .iter()
            .find(|r| r.image_id == b.image_id)
            .with_context(|| format!("no annotation for '{}'", b.image_id))?;
        let gt = rec
            .landmarks
            .as_ref()
            .with_context(|| format!("'{}' has no landmarks", b.image_id))?;
        evals.push(ImageEval {
            image_id: &b.image_id,
            pred: &b.ensembled_coords,
            gt: gt.points(),
            spacing: rec.spacing,
        });
    }
    Ok(EvalReport::compute(&evals)?)
}

/// `eval.json` with the full breakdown and a one-row `eval_summary.csv`.
pub fn write_report(dir: &Path, run: &str, report: &Report) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join("eval.json");
    std::fs::write(&json, serde_json::to_string_pretty(report)?)?;
    let csv_path = dir.join("eval_summary.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["run", "n_images", "mre_mm", "sdr_2mm_pct"])?;
    w.write_record([
        run.to_string(),
        report.n_images.to_string(),
        format!("{:.6}", report.mre_mm),
        format!("{:.4}", report.sdr_2mm_pct),
    ])?;
    w.flush()?;
    Ok((json, csv_path))
}
