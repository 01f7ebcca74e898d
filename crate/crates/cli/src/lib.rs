//! Batch experiments, scenario simulations and the shared acceptance thresholds.

pub mod experiment;
pub mod scenarios;
pub mod thresholds;
