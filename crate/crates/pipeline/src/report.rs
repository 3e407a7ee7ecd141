//! Sweep plots and the fold/ensemble table, as SVG plus CSV.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::trainer::CvSummary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Padding,
    ArtefactRate,
    TopK,
}

impl SweepKind {
    pub fn slug(self) -> &'static str {
        match self {
            SweepKind::Padding => "padding",
            SweepKind::ArtefactRate => "artefact_rate",
            SweepKind::TopK => "top_k",
        }
    }

    pub fn axis_label(self) -> &'static str {
        match self {
            SweepKind::Padding => "Preprocessing (padding px)",
            SweepKind::ArtefactRate => "Artefact rate",
            SweepKind::TopK => "K hottest values averaged",
        }
    }
}

/// One x position of a sweep. `None` metrics mark a missing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    /// Numeric position; categorical points leave it empty.
    pub x: Option<f64>,
    pub mre_mm: Option<f64>,
    pub sdr_2mm_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub run_config_hash: String,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Contiguous runs of present values, so missing points show as gaps.
pub fn segments(values: &[Option<f64>]) -> Vec<Vec<(usize, f64)>> {
    let mut out: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut cur = Vec::new();
    for (i, v) in values.iter().enumerate() {
        match v {
            Some(v) if v.is_finite() => cur.push((i, *v)),
            _ => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.filter(|v| v.is_finite())
        .map(|v| format!("{v:.4}"))
        .unwrap_or_default()
}

/// Writes `<slug>.csv` and `<slug>.svg`; returns both paths.
pub fn plot_sweep(sweep: &SweepResult, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if sweep.points.is_empty() {
        bail!("{} sweep has no points", sweep.kind.slug());
    }
    std::fs::create_dir_all(out_dir)?;
    let slug = sweep.kind.slug();
    let csv_path = out_dir.join(format!("{slug}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["label", "x", "mre_mm", "sdr_2mm_pct"])?;
    for p in &sweep.points {
        w.write_record([
            p.label.clone(),
            fmt_opt(p.x),
            fmt_opt(p.mre_mm),
            fmt_opt(p.sdr_2mm_pct),
        ])?;
    }
    w.flush()?;

    let mre: Vec<Option<f64>> = sweep.points.iter().map(|p| p.mre_mm).collect();
    let missing: Vec<&str> = sweep
        .points
        .iter()
        .filter(|p| !p.mre_mm.is_some_and(f64::is_finite))
        .map(|p| p.label.as_str())
        .collect();
    if !missing.is_empty() {
        log::warn!(
            "{slug} sweep: no result for {}; plotted with gaps",
            missing.join(", ")
        );
    }
    let present: Vec<f64> = mre
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    let (lo, hi) = present
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let (lo, hi) = if present.is_empty() {
        (0.0, 1.0)
    } else {
        let pad = ((hi - lo) * 0.1).max(1e-3);
        ((lo - pad).max(0.0), hi + pad)
    };

    let svg_path = out_dir.join(format!("{slug}.svg"));
    {
        let root = SVGBackend::new(&svg_path, (720, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let n = sweep.points.len();
        let labels: Vec<String> = sweep.points.iter().map(|p| p.label.clone()).collect();
        let mut chart = ChartBuilder::on(&root)
            .caption(
                format!("MRE vs {}", sweep.kind.axis_label()),
                ("sans-serif", 20),
            )
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), lo..hi)?;
        chart
            .configure_mesh()
            .x_desc(sweep.kind.axis_label())
            .y_desc("MRE (mm)")
            .x_labels(n.min(26))
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                    labels[i as usize].clone()
                } else {
                    String::new()
                }
            })
            .draw()?;
        for seg in segments(&mre) {
            chart.draw_series(LineSeries::new(
                seg.iter().map(|(i, v)| (*i as f64, *v)),
                BLUE.stroke_width(2),
            ))?;
            chart.draw_series(
                seg.iter()
                    .map(|(i, v)| Circle::new((*i as f64, *v), 3, BLUE.filled())),
            )?;
        }
        root.present()?;
    }
    Ok((csv_path, svg_path))
}

/// One method row of the fold table.
pub struct CvRow<'a> {
    pub method: String,
    pub summary: &'a CvSummary,
}

fn table_cells(rows: &[CvRow]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let n_folds = rows
        .iter()
        .map(|r| r.summary.folds.len())
        .max()
        .unwrap_or(0);
    if rows.is_empty() || n_folds == 0 {
        bail!("no cross-validation results to tabulate");
    }
    let mut header = vec!["method".to_string()];
    for k in 1..=n_folds {
        header.push(format!("fold{k}_mre_mm"));
        header.push(format!("fold{k}_sdr_2mm_pct"));
    }
    header.push("ensemble_mre_mm".into());
    header.push("ensemble_sdr_2mm_pct".into());
    let body = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.method.clone()];
            for k in 0..n_folds {
                let f = r.summary.folds.iter().find(|f| f.fold == k);
                cells.push(fmt_opt(f.map(|f| f.report.mre_mm)));
                cells.push(fmt_opt(f.map(|f| f.report.sdr_2mm_pct)));
            }
            cells.push(fmt_opt(r.summary.ensemble.as_ref().map(|e| e.mre_mm)));
            cells.push(fmt_opt(r.summary.ensemble.as_ref().map(|e| e.sdr_2mm_pct)));
            cells
        })
        .collect();
    Ok((header, body))
}

/// Fold/ensemble MRE and SDR table as `cv_table.csv` and `cv_table.svg`.
pub fn cv_table(rows: &[CvRow], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (header, body) = table_cells(rows)?;
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("cv_table.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(&header)?;
    for r in &body {
        w.write_record(r)?;
    }
    w.flush()?;

    let svg_path = out_dir.join("cv_table.svg");
    let col_w = 150i32;
    let row_h = 28i32;
    let width = (col_w * header.len() as i32 + 20) as u32;
    let height = (row_h * (body.len() as i32 + 1) + 20) as u32;
    {
        let root = SVGBackend::new(&svg_path, (width, height)).into_drawing_area();
        root.fill(&WHITE)?;
        let style = ("sans-serif", 13).into_font().color(&BLACK);
        for (r, cells) in std::iter::once(&header).chain(&body).enumerate() {
            let y = 10 + r as i32 * row_h;
            for (c, text) in cells.iter().enumerate() {
                root.draw(&Text::new(
                    text.clone(),
                    (10 + c as i32 * col_w, y + 8),
                    style.clone(),
                ))?;
            }
            root.draw(&PathElement::new(
                vec![(10, y + row_h), (width as i32 - 10, y + row_h)],
                BLACK.stroke_width(1),
            ))?;
        }
        root.present()?;
    }
    Ok((csv_path, svg_path))
}
