//! Transformer lesion tracking on 3D volumes.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod real;
pub mod registration;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
