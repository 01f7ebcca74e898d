use thiserror::Error;

/// Errors raised across the simulation, calibration and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("no dip found: {0}")]
    NoDip(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("invalid scan trace: {0}")]
    Trace(String),

    #[error("unknown experiment '{0}'")]
    UnknownExperiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the scan → calibrate pipeline (including "no dip found").
    pub fn is_calibration_failure(&self) -> bool {
        matches!(
            self,
            Error::NoDip(_) | Error::Calibration(_) | Error::Estimation(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
