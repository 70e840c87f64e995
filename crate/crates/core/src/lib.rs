//! Lane detection by direct regression of lane shape parameters.
//!
//! - [`geometry`]: the lane curve family, camera projection and curve fitting.
//! - [`matching`]: Hungarian assignment and the set-matching loss.
//! - [`autograd`]: tensors, a reverse-mode tape, Adam and checkpoints.
//! - [`model`]: the transformer lane detector and its training loop.
//! - [`data`]: synthetic scenes, annotations, augmentation and metrics.

pub mod autograd;
pub mod data;
mod error;
pub mod geometry;
pub mod matching;
pub mod model;

pub use error::{Error, Result};
pub use geometry::{
    CameraModel, FitOptions, FitResult, GroundCurve, ImageCurveParams, LanePolyline,
    TiltedCurveParams,
};
pub use matching::{
    GroundTruthItem, GroundTruthSet, GtLane, LossWeights, Prediction, PredictionSet,
};
pub use autograd::{ParameterStore, Tensor};
