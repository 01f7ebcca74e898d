//! Batch and streaming analysis of tracker output.

mod median;
mod psd;
mod stats;

pub use median::{median_filter, StreamingMedian};
pub use psd::{band_mean, decade_contrast_db, psd, psd_with, write_psd_csv, WelchConfig};
pub use stats::{
    gaussianity, series_stats, snr, snr_from_moments, write_stats_csv, GaussianityReport, Histogram,
    SeriesStats, Verdict, GAUSSIAN_KURTOSIS_LIMIT, GAUSSIAN_MIN_SAMPLES, GAUSSIAN_SKEW_LIMIT,
    HISTOGRAM_BINS,
};
