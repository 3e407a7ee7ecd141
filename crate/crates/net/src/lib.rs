//! Trainable networks on candle: the ConvNeXt V2 heatmap model for landmark
//! regression and a single-class anchor detector for face-region extraction.
//!
//! Activations are channels-last; the heavy convolutions run through custom
//! CPU kernels in [`ops`]. Parameters keep the reference checkpoint layout.

pub mod convnext;
pub mod detector;
pub mod error;
pub mod layers;
pub mod model;
pub mod ops;
pub mod params;
pub mod train;

pub use error::{Error, Result};
pub use layers::Mode;
pub use model::{build_model, heatmap_loss, CheckpointMeta, LandmarkModel, ModelSpec, Variant};
