//! Pass/fail limits shared by the experiment reports and the acceptance suite.
//!
//! Each limit carries where it comes from: a reference measurement of the physical
//! sensor, or a value produced by a simulation or closed-form oracle.

use serde::Serialize;

pub const VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ReferenceMeasurement,
    DerivedOracle,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::ReferenceMeasurement => "reference-measurement",
            Provenance::DerivedOracle => "derived-oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Threshold {
    pub name: &'static str,
    pub value: f64,
    pub provenance: Provenance,
    pub basis: &'static str,
}

const fn t(name: &'static str, value: f64, provenance: Provenance, basis: &'static str) -> Threshold {
    Threshold {
        name,
        value,
        provenance,
        basis,
    }
}

use Provenance::{DerivedOracle, ReferenceMeasurement};

pub const V0_MAX_ERROR_LSB: Threshold = t("v0_max_error_lsb", 1.0, DerivedOracle, "argmin of the noise-free chain");
pub const AM_REL_TOL: Threshold = t("a_m_rel_tol", 0.02, DerivedOracle, "closed-form T' extrema of a Lorentzian");
pub const K_REL_TOL: Threshold = t("k_rel_tol", 1e-9, DerivedOracle, "brute-force least squares on the same samples");
pub const Q_REL_TOL: Threshold = t("q_rel_tol", 0.02, DerivedOracle, "plant ground truth through the chain");
pub const DEPTH_TOL_LSB: Threshold = t("depth_tol_lsb", 2.0, DerivedOracle, "detector gain times line depth");
pub const ONE_STEP_RESIDUAL: Threshold = t("one_step_residual", 0.05, ReferenceMeasurement, "single-step correction in the linear approximation");
pub const THREE_STEP_RESIDUAL: Threshold = t("three_step_residual", 0.005, DerivedOracle, "closed-loop simulation");
pub const SNR_SPREAD_DB: Threshold = t("snr_spread_db", 8.0, ReferenceMeasurement, "reported SNR ordering 48/53/60/62 dB");
pub const MEDIAN_GAIN_DB: Threshold = t("median_gain_db", 3.0, ReferenceMeasurement, "reported +7 dB from the 300-point median filter");
pub const LAG_RATIO: Threshold = t("lag_ratio", 50.0, DerivedOracle, "steady-state ramp lag of a discrete integrator");
pub const GAUSS_SKEW: Threshold = t("gauss_skew", 0.1, DerivedOracle, "moment bound for Gaussian noise");
pub const GAUSS_KURTOSIS: Threshold = t("gauss_excess_kurtosis", 0.2, DerivedOracle, "moment bound for Gaussian noise");
pub const GAUSS_MIN_SAMPLES: Threshold = t("gauss_min_samples", 1e5, DerivedOracle, "sample size for the moment bounds");
pub const PSD_DECADE_DB: Threshold = t("psd_decade_contrast_db", 3.0, ReferenceMeasurement, "noise higher at low frequencies");
pub const SNR_PIN_DB: Threshold = t("snr_pin_db", 46.0, ReferenceMeasurement, "1.33 V mean with 0.0067 V std reads 46 dB");
pub const SNR_PIN_TOL_DB: Threshold = t("snr_pin_tol_db", 0.1, ReferenceMeasurement, "rounding of the worked example");
pub const MODULATION_RATIO_TOL: Threshold = t("modulation_ratio_tol", 0.01, ReferenceMeasurement, "square and sine differ by a constant coefficient");
pub const BENCH_RATE: Threshold = t("bench_rate", 2272.0, ReferenceMeasurement, "bench point rate");
pub const CONSOLE_RATE: Threshold = t("console_rate", 1200.0, ReferenceMeasurement, "point rate with the display attached");
pub const RATE_TOL: Threshold = t("rate_tol", 0.01, DerivedOracle, "pacing accuracy over 10 s");
pub const CONSOLE_RATE_TOL: Threshold = t("console_rate_tol", 0.05, DerivedOracle, "pacing with block pauses");
pub const RECOVERY_LSB: Threshold = t("recovery_lsb", 1.0, DerivedOracle, "noise-free return to baseline");
pub const RELOCK_LSB: Threshold = t("relock_lsb", 1.0, DerivedOracle, "noise-free reacquisition");
pub const RELOCK_JUMP_AM: Threshold = t("relock_jump_am", 50.0, DerivedOracle, "abrupt resonance jump in A_m units");

pub const ALL: &[Threshold] = &[
    V0_MAX_ERROR_LSB,
    AM_REL_TOL,
    K_REL_TOL,
    Q_REL_TOL,
    DEPTH_TOL_LSB,
    ONE_STEP_RESIDUAL,
    THREE_STEP_RESIDUAL,
    SNR_SPREAD_DB,
    MEDIAN_GAIN_DB,
    LAG_RATIO,
    GAUSS_SKEW,
    GAUSS_KURTOSIS,
    GAUSS_MIN_SAMPLES,
    PSD_DECADE_DB,
    SNR_PIN_DB,
    SNR_PIN_TOL_DB,
    MODULATION_RATIO_TOL,
    BENCH_RATE,
    CONSOLE_RATE,
    RATE_TOL,
    CONSOLE_RATE_TOL,
    RECOVERY_LSB,
    RELOCK_LSB,
    RELOCK_JUMP_AM,
];
