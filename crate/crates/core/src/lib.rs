//! Resonance-tracking simulator: plant, calibration, feedback loop and noise analysis.

pub mod calib;
pub mod dsp;
pub mod error;
pub mod plant;
pub mod tracker;

pub use error::{Error, Result};
