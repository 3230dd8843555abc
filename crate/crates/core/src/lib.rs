//! Location-aware semi-supervised domain adaptation for object detection.

pub mod autograd;
pub mod cli;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod imagery;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
