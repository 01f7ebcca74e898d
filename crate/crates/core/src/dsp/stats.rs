use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GAUSSIAN_SKEW_LIMIT: f64 = 0.1;
pub const GAUSSIAN_KURTOSIS_LIMIT: f64 = 0.2;
pub const GAUSSIAN_MIN_SAMPLES: usize = 10_000;
pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: f64,
    /// Sample standard deviation, n−1 denominator.
    pub std: f64,
    pub snr_db: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub n: usize,
}

/// `20·log10(mean/std)`, +∞ for a zero std.
pub fn snr_from_moments(mean: f64, std: f64) -> Result<f64> {
    if !(mean > 0.0) {
        return Err(Error::Domain(format!("SNR needs a positive mean, got {mean}")));
    }
    if std == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (mean / std).log10())
}

/// Moments of a series. Skewness and kurtosis use population central moments and are
/// NaN for a constant series; `snr_db` is NaN when the mean is not positive.
pub fn series_stats(series: &[f64]) -> Result<SeriesStats> {
    let n = series.len();
    if n < 2 {
        return Err(Error::Parameter(format!("statistics need at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in series {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let std = (m2 / (nf - 1.0)).sqrt();
    let (m2, m3, m4) = (m2 / nf, m3 / nf, m4 / nf);
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(SeriesStats {
        mean,
        std,
        snr_db: snr_from_moments(mean, std).unwrap_or(f64::NAN),
        skewness,
        excess_kurtosis,
        n,
    })
}

pub fn snr(series: &[f64]) -> Result<f64> {
    let s = series_stats(series)?;
    snr_from_moments(s.mean, s.std)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ConsistentWithGaussian,
    NotGaussian,
    /// Constant or too short a series.
    NotApplicable,
}

/// Equal-width histogram over `[lo, hi]` with the normal fit from the sample moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub fit_mean: f64,
    pub fit_std: f64,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.counts.len()).map(|i| self.lo + (i as f64 + 0.5) * w).collect()
    }

    /// Expected count per bin under the fitted normal, evaluated at the bin centers.
    pub fn fitted_counts(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        let w = self.bin_width();
        self.centers()
            .into_iter()
            .map(|c| {
                if self.fit_std > 0.0 {
                    let z = (c - self.fit_mean) / self.fit_std;
                    total as f64 * w * (-0.5 * z * z).exp() / (self.fit_std * std::f64::consts::TAU.sqrt())
                } else {
                    f64::NAN
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub stats: SeriesStats,
    pub verdict: Verdict,
    pub histogram: Histogram,
}

fn histogram(series: &[f64], bins: usize, mean: f64, std: f64) -> Histogram {
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0u64; bins];
    let span = hi - lo;
    for &x in series {
        let i = if span > 0.0 {
            (((x - lo) / span) * bins as f64).floor() as usize
        } else {
            0
        };
        counts[i.min(bins - 1)] += 1;
    }
    Histogram {
        lo,
        hi,
        counts,
        fit_mean: mean,
        fit_std: std,
    }
}

/// Moment-bound Gaussianity check: consistent when `|skew| < 0.1` and
/// `|excess kurtosis| < 0.2`, with at least 10⁴ samples.
pub fn gaussianity(series: &[f64]) -> Result<GaussianityReport> {
    let stats = series_stats(series)?;
    let verdict = if stats.std == 0.0 || stats.n < GAUSSIAN_MIN_SAMPLES {
        Verdict::NotApplicable
    } else if stats.skewness.abs() < GAUSSIAN_SKEW_LIMIT && stats.excess_kurtosis.abs() < GAUSSIAN_KURTOSIS_LIMIT {
        Verdict::ConsistentWithGaussian
    } else {
        Verdict::NotGaussian
    };
    Ok(GaussianityReport {
        stats,
        verdict,
        histogram: histogram(series, HISTOGRAM_BINS, stats.mean, stats.std),
    })
}

/// `key,value` rows.
pub fn write_stats_csv<W: Write>(stats: &SeriesStats, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["key", "value"])?;
    for (k, v) in [
        ("mean", stats.mean),
        ("std", stats.std),
        ("snr_db", stats.snr_db),
        ("skewness", stats.skewness),
        ("excess_kurtosis", stats.excess_kurtosis),
        ("n", stats.n as f64),
    ] {
        out.write_record([k, &v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
