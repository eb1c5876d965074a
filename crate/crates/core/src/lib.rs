//! Reference-conditioned segmentation trained with limited labels and
//! adversarial boundary critics fed by an unrelated labelled dataset.

pub mod affine;
pub mod checkpoint;
pub mod convert;
pub mod critic;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod model;
pub mod morphology;
pub mod params;
pub mod sweep;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
