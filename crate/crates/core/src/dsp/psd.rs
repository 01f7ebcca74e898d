use std::io::Write;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchConfig {
    pub segment: usize,
    pub overlap: usize,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            segment: 256,
            overlap: 128,
        }
    }
}

/// One-sided Welch PSD in V²/Hz with the default 256-point, 50%-overlap Hann setup.
pub fn psd(series: &[f64], sample_rate: f64) -> Result<Vec<(f64, f64)>> {
    psd_with(series, sample_rate, WelchConfig::default())
}

pub fn psd_with(series: &[f64], sample_rate: f64, cfg: WelchConfig) -> Result<Vec<(f64, f64)>> {
    let m = cfg.segment;
    if m < 2 || cfg.overlap >= m {
        return Err(Error::Parameter(format!(
            "welch segment {m} with overlap {} is invalid",
            cfg.overlap
        )));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::Parameter("sample_rate must be > 0".into()));
    }
    if series.len() < m {
        return Err(Error::Parameter(format!(
            "series of {} samples is shorter than one {m}-point segment",
            series.len()
        )));
    }
    let hop = m - cfg.overlap;
    let window: Vec<f64> = (0..m)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / m as f64).cos())
        .collect();
    let power: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(m);
    let bins = m / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    let mut count = 0usize;
    let mut start = 0;
    while start + m <= series.len() {
        let seg = &series[start..start + m];
        let mean = seg.iter().sum::<f64>() / m as f64;
        for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        count += 1;
        start += hop;
    }
    let scale = 1.0 / (sample_rate * power * count as f64);
    Ok(acc
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let one_sided = if k == 0 || (m % 2 == 0 && k == bins - 1) { 1.0 } else { 2.0 };
            (k as f64 * sample_rate / m as f64, p * scale * one_sided)
        })
        .collect())
}

/// Mean density over bins with `lo <= f <= hi`.
pub fn band_mean(psd: &[(f64, f64)], lo: f64, hi: f64) -> Option<f64> {
    let (sum, n) = psd
        .iter()
        .filter(|(f, _)| *f >= lo && *f <= hi)
        .fold((0.0, 0usize), |(s, n), (_, p)| (s + p, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Lowest decade (first non-DC bin to ten times it) over the highest decade (a tenth of
/// Nyquist to Nyquist), in dB.
pub fn decade_contrast_db(psd: &[(f64, f64)]) -> Option<f64> {
    let f1 = psd.get(1)?.0;
    let nyquist = psd.last()?.0;
    let low = band_mean(psd, f1, 10.0 * f1)?;
    let high = band_mean(psd, nyquist / 10.0, nyquist)?;
    Some(10.0 * (low / high).log10())
}

/// `frequency,density` rows.
pub fn write_psd_csv<W: Write>(psd: &[(f64, f64)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["frequency", "density"])?;
    for (f, p) in psd {
        out.write_record([f.to_string(), p.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn sine_peak_lands_on_its_bin() {
        let fs = 1000.0;
        let f0 = 117.0;
        let x: Vec<f64> = (0..8192)
            .map(|i| (std::f64::consts::TAU * f0 * i as f64 / fs).sin())
            .collect();
        let p = psd(&x, fs).unwrap();
        let peak = p.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert!((peak - f0).abs() <= fs / 256.0);
    }

    #[test]
    fn parseval() {
        let x = white(65_536, 1);
        let p = psd(&x, 2272.0).unwrap();
        let df = p[1].0;
        let integral: f64 = p.iter().map(|(_, d)| d * df).sum();
        let var = crate::dsp::series_stats(&x).unwrap().std.powi(2);
        assert!((integral / var - 1.0).abs() < 0.05, "{integral} vs {var}");
    }

    #[test]
    fn white_noise_is_flat() {
        let x = white(200_000, 2);
        let p = psd(&x, 2272.0).unwrap();
        assert!(decade_contrast_db(&p).unwrap().abs() < 1.5);
    }

    #[test]
    fn short_series_rejected() {
        assert!(psd(&[0.0; 255], 1.0).is_err());
        assert_eq!(psd(&[0.0; 256], 1.0).unwrap().len(), 129);
    }
}
