use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("landmark count mismatch for '{id}': expected {expected} points, found {found}")]
    LandmarkCount {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("image file for '{id}' not found at {path}")]
    MissingImage { id: String, path: PathBuf },
    #[error("spacing for '{id}' must be positive, got {spacing}")]
    InvalidSpacing { id: String, spacing: f64 },
    #[error("landmark {index} of '{id}' is invalid: {reason}")]
    InvalidLandmark {
        id: String,
        index: usize,
        reason: String,
    },
    #[error("duplicate image id '{0}'")]
    DuplicateId(String),
    #[error("degenerate bounding box: {0}")]
    DegenerateBox(String),
    #[error("no detection above threshold for '{id}' and no fallback configured")]
    NoDetection { id: String },
    #[error("detector failure: {0}")]
    Detector(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no valid landmarks: loss has no training signal")]
    NoValidLandmarks,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("annotation parse error at row {row}: {reason}")]
    Parse { row: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
