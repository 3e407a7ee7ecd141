//! Annotation CSV ingestion and per-image records.
//!
//! The annotation file has a header row and one row per image:
//! `image_id,spacing,x1,y1,...,x53,y53`, coordinates in original-image
//! pixels and spacing in mm per pixel. Submission files use the same layout
//! without the `spacing` column; [`read_annotations`] accepts both.

use std::borrow::Cow;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::imageops;
use crate::landmarks::{LandmarkSet, N_LANDMARKS};
use crate::scalar::Scalar;

/// Pixel distance to millimetres.
pub fn to_mm<T: Scalar>(dist_px: T, spacing: T) -> T {
    debug_assert!(spacing > T::zero(), "spacing must be positive");
    dist_px * spacing
}

/// One parsed annotation or submission row.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRow<T> {
    pub image_id: String,
    pub spacing: Option<T>,
    pub points: Vec<Point2<T>>,
}

#[derive(Debug, Clone)]
pub enum PixelSource {
    InMemory(Array2<u8>),
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ImageRecord<T> {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// Millimetres per pixel.
    pub spacing: T,
    pub landmarks: Option<LandmarkSet<T>>,
    source: PixelSource,
}

impl<T: Scalar> ImageRecord<T> {
    pub fn in_memory(
        image_id: impl Into<String>,
        pixels: Array2<u8>,
        spacing: T,
        landmarks: Option<LandmarkSet<T>>,
    ) -> Result<Self> {
        let (height, width) = pixels.dim();
        Self::build(
            image_id.into(),
            height,
            width,
            spacing,
            landmarks,
            PixelSource::InMemory(pixels),
        )
    }

    pub fn from_file(
        image_id: impl Into<String>,
        path: PathBuf,
        spacing: T,
        landmarks: Option<LandmarkSet<T>>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if !path.is_file() {
            return Err(Error::MissingImage { id: image_id, path });
        }
        let (w, h) = image::image_dimensions(&path)?;
        Self::build(
            image_id,
            h as usize,
            w as usize,
            spacing,
            landmarks,
            PixelSource::File(path),
        )
    }

    fn build(
        image_id: String,
        height: usize,
        width: usize,
        spacing: T,
        landmarks: Option<LandmarkSet<T>>,
        source: PixelSource,
    ) -> Result<Self> {
        if !(spacing > T::zero()) || !spacing.is_finite() {
            return Err(Error::InvalidSpacing {
                id: image_id,
                spacing: spacing.to_f64_lossy(),
            });
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image '{image_id}' is empty"
            )));
        }
        if let Some(lm) = &landmarks {
            lm.check_bounds(&image_id, height, width)?;
        }
        Ok(Self {
            image_id,
            height,
            width,
            spacing,
            landmarks,
            source,
        })
    }

    /// The 8-bit grayscale pixels, read from disk on demand.
    pub fn pixels(&self) -> Result<Cow<'_, Array2<u8>>> {
        match &self.source {
            PixelSource::InMemory(p) => Ok(Cow::Borrowed(p)),
            PixelSource::File(path) => {
                let plane = imageops::load_gray(path)?;
                if plane.dim() != (self.height, self.width) {
                    return Err(Error::ShapeMismatch(format!(
                        "'{}' changed size on disk",
                        self.image_id
                    )));
                }
                Ok(Cow::Owned(plane))
            }
        }
    }

    pub fn source(&self) -> &PixelSource {
        &self.source
    }
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    /// Extension appended to `image_id` to find the image file.
    pub image_ext: String,
    /// Physical distance between the two ruler landmarks. Used to derive
    /// spacing for rows whose spacing column is empty.
    pub ruler_length_mm: Option<f64>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            image_ext: "png".into(),
            ruler_length_mm: None,
        }
    }
}

pub fn read_annotations<T: Scalar>(path: &Path) -> Result<Vec<AnnotationRow<T>>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let has_spacing = headers
        .get(1)
        .is_some_and(|h| h.eq_ignore_ascii_case("spacing"));
    let coord_start = if has_spacing { 2 } else { 1 };
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let image_id = rec.get(0).unwrap_or_default().to_string();
        if image_id.is_empty() {
            return Err(Error::Parse {
                row,
                reason: "empty image_id".into(),
            });
        }
        if !seen.insert(image_id.clone()) {
            return Err(Error::DuplicateId(image_id));
        }
        let parse = |s: &str| -> Result<T> {
            s.parse::<f64>().map(T::c).map_err(|e| Error::Parse {
                row,
                reason: format!("'{s}': {e}"),
            })
        };
        let spacing = if has_spacing {
            match rec.get(1).unwrap_or_default() {
                "" => None,
                s => Some(parse(s)?),
            }
        } else {
            None
        };
        let values: Vec<&str> = rec
            .iter()
            .skip(coord_start)
            .filter(|s| !s.is_empty())
            .collect();
        if !values.len().is_multiple_of(2) || values.len() / 2 != N_LANDMARKS {
            return Err(Error::LandmarkCount {
                id: image_id,
                expected: N_LANDMARKS,
                found: values.len() / 2,
            });
        }
        let points = values
            .chunks_exact(2)
            .map(|xy| Ok(Point2::new(parse(xy[0])?, parse(xy[1])?)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AnnotationRow {
            image_id,
            spacing,
            points,
        });
    }
    Ok(rows)
}

fn coord_header(with_spacing: bool) -> Vec<String> {
    let mut header = vec!["image_id".to_string()];
    if with_spacing {
        header.push("spacing".into());
    }
    for i in 1..=N_LANDMARKS {
        header.push(format!("x{i}"));
        header.push(format!("y{i}"));
    }
    header
}

fn write_rows<T: Scalar>(path: &Path, rows: &[AnnotationRow<T>], with_spacing: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(coord_header(with_spacing))?;
    for row in rows {
        if row.points.len() != N_LANDMARKS {
            return Err(Error::LandmarkCount {
                id: row.image_id.clone(),
                expected: N_LANDMARKS,
                found: row.points.len(),
            });
        }
        let mut fields = vec![row.image_id.clone()];
        if with_spacing {
            fields.push(row.spacing.map(|s| s.to_string()).unwrap_or_default());
        }
        for p in &row.points {
            fields.push(p.x.to_string());
            fields.push(p.y.to_string());
        }
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the annotation schema (with spacing column).
pub fn write_annotations<T: Scalar>(path: &Path, rows: &[AnnotationRow<T>]) -> Result<()> {
    write_rows(path, rows, true)
}

/// Writes the submission schema: `image_id,x1,y1,...,x53,y53`.
pub fn write_submission<T: Scalar>(path: &Path, rows: &[AnnotationRow<T>]) -> Result<()> {
    write_rows(path, rows, false)
}

/// Reads the annotation file and resolves one record per row. Image files
/// are located at `root/<image_id>.<ext>`; only their headers are read here.
pub fn load_dataset<T: Scalar>(
    root: &Path,
    annotation_file: &Path,
    options: &DatasetOptions,
) -> Result<Vec<ImageRecord<T>>> {
    let rows = read_annotations::<T>(annotation_file)?;
    rows.into_iter()
        .map(|row| {
            let landmarks = LandmarkSet::with_id(&row.image_id, row.points)?;
            let spacing = resolve_spacing(&row.image_id, row.spacing, &landmarks, options)?;
            let path = root.join(format!("{}.{}", row.image_id, options.image_ext));
            ImageRecord::from_file(row.image_id, path, spacing, Some(landmarks))
        })
        .collect()
}

fn resolve_spacing<T: Scalar>(
    id: &str,
    spacing: Option<T>,
    landmarks: &LandmarkSet<T>,
    options: &DatasetOptions,
) -> Result<T> {
    match (spacing, options.ruler_length_mm) {
        (Some(s), _) => Ok(s),
        (None, Some(len_mm)) => {
            let px = landmarks.ruler_length_px();
            if px > T::zero() {
                log::debug!("{id}: spacing from ruler, {px} px for {len_mm} mm");
                Ok(T::c(len_mm) / px)
            } else {
                Err(Error::InvalidSpacing {
                    id: id.into(),
                    spacing: 0.0,
                })
            }
        }
        (None, None) => Err(Error::InvalidSpacing {
            id: id.into(),
            spacing: f64::NAN,
        }),
    }
}
