//! Scalar-generic building blocks for two-stage cephalometric landmark
//! detection: annotation I/O and folds, region cropping with exact inverse
//! coordinate maps, heatmap targets and loss, top-K decoding, ensembling,
//! MRE/SDR metrics, augmentation and training schedules.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common case.

pub mod augment;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod folds;
pub mod geometry;
pub mod imageops;
pub mod landmarks;
pub mod loss;
pub mod metrics;
pub mod region;
pub mod scalar;
pub mod schedule;
pub mod target;

pub use error::{Error, Result};
pub use landmarks::N_LANDMARKS;
pub use scalar::Scalar;

pub type Point = geometry::Point2<f64>;
pub type BBox = geometry::BoundingBox<f64>;
pub type Transform = geometry::RegionTransform<f64>;
pub type Landmarks = landmarks::LandmarkSet<f64>;
pub type Record = dataset::ImageRecord<f64>;
pub type Report = metrics::EvalReport<f64>;
pub type Crop = region::RegionCrop<f32>;
pub type Target = target::TargetHeatmap<f32>;
