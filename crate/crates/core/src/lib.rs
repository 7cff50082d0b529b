//! Weakly-supervised object localization at desk scale.
//!
//! Trains a pre-activation residual classifier from image-level labels only,
//! derives class activation maps from the final feature maps, and extracts
//! bounding boxes from them. Includes the two stochastic augmentations under
//! study (patch hiding and randomized scale/aspect cropping), a synthetic
//! shape dataset generator, evaluation metrics, and a multi-run matrix
//! driver. All numeric work is in `f64` and every run is bitwise
//! reproducible from its seed.

pub mod augment;
pub mod cam;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
