//! Training, cross-validation, ensembling and reporting on top of
//! `cephalo-core` and `cephalo-net`.

pub mod config;
pub mod evaluate;
pub mod predict;
pub mod report;
pub mod samples;
pub mod sweep;
pub mod synth;
pub mod trainer;

pub use config::RunConfig;
pub use predict::{PredictionBundle, Predictor};
