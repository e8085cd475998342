//! Training, 16-bit quantization and accelerator simulation for a one-layer
//! 1-D CNN that classifies bearing faults from vibration spectra.

pub mod accel;
pub mod distill;
pub mod error;
pub mod fixedpoint;
pub mod metrics;
pub mod nn;
pub mod quantize;
pub mod signal;

pub use error::{Error, Result};
