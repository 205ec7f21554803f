//! Region-concentrated adversarial data augmentation for camera pose
//! regression, with baseline perturbers, a synthetic cross-weather data
//! generator, training orchestration, evaluation and perturbation analysis.

pub mod analysis;
pub mod domain;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod perturb;
pub mod storage;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
