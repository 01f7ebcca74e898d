//! Frequency-scanning mode and automatic derivation of the lock parameters.
//!
//! Everything here works on (V_DAC, V_ADC) pairs as the microcontroller sees them.
//! Frequencies only appear when Q is reported, via the VCO tuning curve.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{Plant, PlantConfig, VcoConfig};

/// Minimum trace length accepted by [`calibrate`].
pub const MIN_CALIBRATION_POINTS: usize = 32;

/// Tolerance on the uniform DAC step of a trace, volts.
pub const STEP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub v_dac: f64,
    pub v_adc: f64,
}

/// Ordered scan samples with a uniform DAC step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTrace {
    points: Vec<ScanPoint>,
    step: f64,
    averaging: usize,
}

impl ScanTrace {
    pub fn new(points: Vec<ScanPoint>, step: f64, averaging: usize) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Trace(format!("step must be > 0, got {step}")));
        }
        if averaging == 0 {
            return Err(Error::Trace("averaging must be >= 1".into()));
        }
        if points.len() < 2 {
            return Err(Error::Trace("a trace needs at least two points".into()));
        }
        for (i, w) in points.windows(2).enumerate() {
            let dv = w[1].v_dac - w[0].v_dac;
            if (dv - step).abs() > STEP_TOLERANCE {
                return Err(Error::Trace(format!(
                    "non-uniform step {dv} V at index {i} (expected {step} V)"
                )));
            }
        }
        if points.iter().any(|p| !(p.v_dac.is_finite() && p.v_adc.is_finite())) {
            return Err(Error::Trace("trace values must be finite".into()));
        }
        Ok(Self {
            points,
            step,
            averaging,
        })
    }

    /// Builds a trace from uniformly spaced readings starting at `v_lo`.
    pub fn from_readings(v_lo: f64, step: f64, readings: &[f64], averaging: usize) -> Result<Self> {
        let points = readings
            .iter()
            .enumerate()
            .map(|(i, &v_adc)| ScanPoint {
                v_dac: v_lo + i as f64 * step,
                v_adc,
            })
            .collect();
        Self::new(points, step, averaging)
    }

    pub fn points(&self) -> &[ScanPoint] {
        &self.points
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn averaging(&self) -> usize {
        self.averaging
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn v_dac(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.v_dac).collect()
    }

    pub fn v_adc(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.v_adc).collect()
    }

    pub fn range(&self) -> [f64; 2] {
        [self.points[0].v_dac, self.points[self.points.len() - 1].v_dac]
    }

    /// Same abscissae with every reading mapped through `f`.
    pub fn map_adc(&self, f: impl Fn(f64) -> f64) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| ScanPoint {
                v_dac: p.v_dac,
                v_adc: f(p.v_adc),
            })
            .collect();
        Self {
            points,
            step: self.step,
            averaging: self.averaging,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# step={}", self.step)?;
        writeln!(w, "# averaging={}", self.averaging)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["v_dac", "v_adc"])?;
        for p in &self.points {
            out.write_record([p.v_dac.to_string(), p.v_adc.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let (meta, rows) = read_commented_csv(r)?;
        let step = meta_value(&meta, "step")?;
        let averaging = meta_value(&meta, "averaging")? as usize;
        let points = rows
            .iter()
            .map(|row| {
                Ok(ScanPoint {
                    v_dac: parse_field(row, 0)?,
                    v_adc: parse_field(row, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, step, averaging)
    }
}

/// Scan range, DAC step and per-point averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub range: [f64; 2],
    pub step: f64,
    pub averaging: usize,
}

/// Default number of points in a full-range scan.
pub const DEFAULT_SCAN_POINTS: usize = 1024;

impl Default for ScanConfig {
    fn default() -> Self {
        Self::full_range(&PlantConfig::default(), DEFAULT_SCAN_POINTS, 4)
    }
}

impl ScanConfig {
    /// Whole DAC range split into roughly `points` samples.
    pub fn full_range(plant: &PlantConfig, points: usize, averaging: usize) -> Self {
        let range = plant.dac_range();
        Self {
            range,
            step: (range[1] - range[0]) / (points.max(2) - 1) as f64,
            averaging,
        }
    }
}

/// Frequency-scanning mode: one averaged ADC reading per DAC step, ascending.
///
/// The DAC only outputs code voltages, so the step is rounded to a whole number of
/// codes (at least one) and the recorded abscissae are the driven code voltages.
pub fn scan(plant: &mut Plant, cfg: &ScanConfig) -> Result<ScanTrace> {
    let [v_lo, v_hi] = cfg.range;
    let [v_min, v_max] = plant.config().vco.v_range;
    if !(v_lo < v_hi) || v_lo < v_min || v_hi > v_max {
        return Err(Error::Range(format!(
            "scan range [{v_lo}, {v_hi}] V must be ascending inside the VCO range [{v_min}, {v_max}] V"
        )));
    }
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::Parameter(format!("scan step must be > 0, got {}", cfg.step)));
    }
    if cfg.averaging == 0 {
        return Err(Error::Parameter("scan averaging must be >= 1".into()));
    }
    let q = &plant.config().quantizer;
    let lsb = q.lsb();
    let codes_per_step = ((cfg.step / lsb).round() as u64).max(1);
    let first = ((v_lo / lsb).ceil() as u64).min(q.max_code() as u64);
    let last = ((v_hi / lsb).floor() as u64).min(q.max_code() as u64);
    if last <= first {
        return Err(Error::Range("scan range spans less than one DAC code".into()));
    }
    let step = codes_per_step as f64 * lsb;
    let mut points = Vec::new();
    let mut code = first;
    while code <= last {
        let v_dac = code as f64 * lsb;
        let reading = plant.sample_averaged(v_dac, cfg.averaging)?;
        points.push(ScanPoint {
            v_dac,
            v_adc: reading.volts,
        });
        code += codes_per_step;
    }
    ScanTrace::new(points, step, cfg.averaging)
}

/// Local quadratic least-squares smoothing over five points.
///
/// Interior points use the symmetric kernel; the two points at each end are evaluated on
/// the quadratic fitted to the nearest five samples. Exact for quadratics.
pub fn smooth(y: &[f64]) -> Vec<f64> {
    const INTERIOR: [f64; 5] = [-3.0, 12.0, 17.0, 12.0, -3.0];
    const EDGE0: [f64; 5] = [31.0, 9.0, -3.0, -5.0, 3.0];
    const EDGE1: [f64; 5] = [9.0, 13.0, 12.0, 6.0, -5.0];
    let n = y.len();
    if n < 5 {
        return y.to_vec();
    }
    let dot = |k: &[f64; 5], w: &[f64]| k.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / 35.0;
    let dot_rev = |k: &[f64; 5], w: &[f64]| k.iter().zip(w.iter().rev()).map(|(a, b)| a * b).sum::<f64>() / 35.0;
    let mut out = vec![0.0; n];
    out[0] = dot(&EDGE0, &y[..5]);
    out[1] = dot(&EDGE1, &y[..5]);
    for i in 2..n - 2 {
        out[i] = dot(&INTERIOR, &y[i - 2..=i + 2]);
    }
    out[n - 2] = dot_rev(&EDGE1, &y[n - 5..]);
    out[n - 1] = dot_rev(&EDGE0, &y[n - 5..]);
    out
}

/// Robust white-noise estimate from second differences (MAD scaled to σ).
pub fn noise_estimate(y: &[f64]) -> f64 {
    if y.len() < 3 {
        return 0.0;
    }
    let mut d2: Vec<f64> = y
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
        .collect();
    let mad = median_in_place(&mut d2);
    mad / (0.674_489_750_196_081_7 * 6f64.sqrt())
}

fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn argmin(y: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in y.iter().enumerate() {
        if v < y[best] {
            best = i;
        }
    }
    best
}

fn argmax(y: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in y.iter().enumerate() {
        if v > y[best] {
            best = i;
        }
    }
    best
}

/// Factor applied to the noise estimate below which a dip is not accepted.
pub const DIP_CONTRAST_FACTOR: f64 = 4.0;

/// Index of the dip in the smoothed trace; lowest index on ties.
fn dip_index(trace: &ScanTrace, smoothed: &[f64]) -> Result<usize> {
    let raw = trace.v_adc();
    let noise = noise_estimate(&raw);
    let mut sorted = smoothed.to_vec();
    let median = median_in_place(&mut sorted);
    let i0 = argmin(smoothed);
    let contrast = median - smoothed[i0];
    // Rounding in the smoother leaves a residue on a perfectly flat trace.
    let floor = 1e-9 * median.abs().max(1e-12);
    if contrast <= (DIP_CONTRAST_FACTOR * noise).max(floor) {
        return Err(Error::NoDip(format!(
            "dip contrast {contrast:.3e} V does not exceed {DIP_CONTRAST_FACTOR} x noise {noise:.3e} V"
        )));
    }
    Ok(i0)
}

/// DAC voltage of the global minimum of the smoothed trace.
pub fn find_dip(trace: &ScanTrace) -> Result<f64> {
    let smoothed = smooth(&trace.v_adc());
    let i0 = dip_index(trace, &smoothed)?;
    Ok(trace.points[i0].v_dac)
}

/// dV_ADC/dV_DAC of the smoothed trace: central differences, one-sided at the ends.
pub fn derivative(trace: &ScanTrace) -> Vec<(f64, f64)> {
    let s = smooth(&trace.v_adc());
    let h = trace.step;
    let n = s.len();
    (0..n)
        .map(|i| {
            let slope = if i == 0 {
                (s[1] - s[0]) / h
            } else if i == n - 1 {
                (s[n - 1] - s[n - 2]) / h
            } else {
                (s[i + 1] - s[i - 1]) / (2.0 * h)
            };
            (trace.points[i].v_dac, slope)
        })
        .collect()
}

/// Vertex offset (in samples, within ±0.5) of the parabola through three neighbours.
fn parabolic_offset(y_prev: f64, y: f64, y_next: f64) -> f64 {
    let denom = y_prev - 2.0 * y + y_next;
    if denom == 0.0 {
        0.0
    } else {
        (0.5 * (y_prev - y_next) / denom).clamp(-0.5, 0.5)
    }
}

/// Target noise on the averaged T′, relative to its peak magnitude.
const PEAK_NOISE_TARGET: f64 = 0.01;

/// Odd moving-average width that brings the T′ noise down to the target, capped at 1/16
/// of the trace.
fn peak_smoothing_width(y: &[f64]) -> usize {
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma = noise_estimate(y);
    if !(peak > 0.0) || sigma == 0.0 {
        return 1;
    }
    let w = ((sigma / (PEAK_NOISE_TARGET * peak)).powi(2)).ceil() as usize;
    let cap = (y.len() / 16).max(1);
    w.clamp(1, cap) | 1
}

/// Centered moving average, shrinking symmetrically at the ends.
fn boxcar(y: &[f64], width: usize) -> Vec<f64> {
    if width <= 1 {
        return y.to_vec();
    }
    let n = y.len();
    let half = width / 2;
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in y.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            (prefix[i + h + 1] - prefix[i - h]) / (2 * h + 1) as f64
        })
        .collect()
}

/// Fraction of the peak value that bounds the extremum fit region.
const PEAK_FRACTION: f64 = 0.9;

/// Location of the extremum at index `i` from a cubic fit of `points` over the contiguous
/// samples where |guide| ≥ fraction·|guide_i|. `None` when the region has fewer than 7
/// samples or the fitted stationary point falls outside it.
fn cubic_peak(points: &[(f64, f64)], guide: &[f64], i: usize, fraction: f64) -> Option<f64> {
    let level = fraction * guide[i].abs();
    let inside = |k: usize| guide[k].abs() >= level && guide[k].signum() == guide[i].signum();
    let mut lo = i;
    while lo > 0 && inside(lo - 1) {
        lo -= 1;
    }
    let mut hi = i;
    while hi + 1 < points.len() && inside(hi + 1) {
        hi += 1;
    }
    if hi - lo + 1 < 7 {
        return None;
    }
    let region = &points[lo..=hi];
    let center = points[i].0;
    let scale = (region[region.len() - 1].0 - region[0].0) / 2.0;
    // Normal equations for y = c0 + c1 u + c2 u² + c3 u³ with u = (x − center)/scale.
    let mut a = [[0.0f64; 5]; 4];
    for &(x, y) in region {
        let u = (x - center) / scale;
        let pow = [1.0, u, u * u, u * u * u];
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += pow[r] * pow[c];
            }
            a[r][4] += pow[r] * y;
        }
    }
    let c = solve4(a)?;
    // Stationary points: 3c3 u² + 2c2 u + c1 = 0; keep the real root nearest u = 0.
    let (qa, qb, qc) = (3.0 * c[3], 2.0 * c[2], c[1]);
    let u = if qa.abs() < 1e-12 * qb.abs().max(1e-300) {
        -qc / qb
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let r1 = (-qb + sq) / (2.0 * qa);
        let r2 = (-qb - sq) / (2.0 * qa);
        if r1.abs() < r2.abs() {
            r1
        } else {
            r2
        }
    };
    let x = center + u * scale;
    (u.is_finite() && x >= region[0].0 && x <= region[region.len() - 1].0).then_some(x)
}

/// Gaussian elimination with partial pivoting on an augmented 4×5 system.
fn solve4(mut a: [[f64; 5]; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..5 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let tail: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (a[row][4] - tail) / a[row][row];
    }
    Some(x)
}

fn nearest_index(t_prime: &[(f64, f64)], v: f64) -> usize {
    t_prime
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 .0 - v).abs().total_cmp(&(b.1 .0 - v).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Default ratio between the modulation amplitude and the T′ extremum separation.
pub const AM_COEFFICIENT: f64 = 1.0 / 8.0;

/// Modulation amplitude: `coefficient` times the DAC separation between the minimum of
/// T′ (left of the dip) and its maximum (right of the dip).
///
/// Each extremum is located by a cubic least-squares fit over the contiguous samples
/// within 10% of the peak value; the lobes are skewed, so a parabola would be biased.
/// On noisy traces the peak and its region are first found on a moving average of T′
/// whose width grows with the noise; the fit itself uses the unaveraged samples.
/// Narrow peaks fall back to a three-point parabola.
pub fn compute_am(t_prime: &[(f64, f64)], v0: f64, coefficient: f64) -> Result<f64> {
    let n = t_prime.len();
    if n < 3 {
        return Err(Error::Calibration("T' has fewer than three samples".into()));
    }
    let raw: Vec<f64> = t_prime.iter().map(|p| p.1).collect();
    let slopes = boxcar(&raw, peak_smoothing_width(&raw));
    let i0 = nearest_index(t_prime, v0);
    let i_min = argmin(&slopes[..=i0]);
    let i_max = i0 + argmax(&slopes[i0..]);
    if i_min == 0 || i_max == n - 1 {
        return Err(Error::Calibration(
            "T' extrema are not bracketed by the scan".into(),
        ));
    }
    let h = t_prime[1].0 - t_prime[0].0;
    let locate = |i: usize| {
        cubic_peak(t_prime, &slopes, i, PEAK_FRACTION)
            .unwrap_or_else(|| t_prime[i].0 + h * parabolic_offset(slopes[i - 1], slopes[i], slopes[i + 1]))
    };
    let width = locate(i_max) - locate(i_min);
    if !(slopes[i_max] > 0.0 && slopes[i_min] < 0.0 && width > 0.0) {
        return Err(Error::Calibration(
            "T' does not change sign through the dip".into(),
        ));
    }
    Ok(coefficient * width)
}

/// Ordinary least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (sxy, sxx) = x.iter().zip(y).fold((0.0, 0.0), |(sxy, sxx), (&xi, &yi)| {
        let dx = xi - mx;
        (sxy + dx * (yi - my), sxx + dx * dx)
    });
    sxy / sxx
}

/// Half-width of the gain regression window in units of A_m.
pub const K_WINDOW: f64 = 3.0;

/// T′ samples inside `[v0 − window·a_m, v0 + window·a_m]`; fails when the interval is not
/// inside the scanned range.
pub fn regression_window(t_prime: &[(f64, f64)], v0: f64, a_m: f64, window: f64) -> Result<Vec<(f64, f64)>> {
    let lo = v0 - window * a_m;
    let hi = v0 + window * a_m;
    let first = t_prime.first().map(|p| p.0).unwrap_or(f64::NAN);
    let last = t_prime.last().map(|p| p.0).unwrap_or(f64::NAN);
    if !(lo >= first && hi <= last) {
        return Err(Error::Calibration(format!(
            "regression interval [{lo:.4}, {hi:.4}] V leaves the scanned range [{first:.4}, {last:.4}] V"
        )));
    }
    let eps = 1e-12;
    let pts: Vec<(f64, f64)> = t_prime
        .iter()
        .copied()
        .filter(|p| p.0 >= lo - eps && p.0 <= hi + eps)
        .collect();
    if pts.len() < 3 {
        return Err(Error::Calibration(
            "fewer than three T' samples inside the regression interval".into(),
        ));
    }
    Ok(pts)
}

/// Loop gain K: reciprocal of the least-squares slope of T′ around the dip.
pub fn compute_k(t_prime: &[(f64, f64)], v0: f64, a_m: f64, window: f64) -> Result<f64> {
    let pts = regression_window(t_prime, v0, a_m, window)?;
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let slope = ols_slope(&x, &y);
    if !(slope > 0.0) {
        return Err(Error::Calibration(format!(
            "T' slope {slope:.3e} is not positive; no dip curvature"
        )));
    }
    Ok(1.0 / slope)
}

/// Dip geometry on the smoothed trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipShape {
    pub v0: f64,
    pub bottom: f64,
    pub top: f64,
    /// Dip depth with the off-resonance level extrapolated past the scan edge.
    pub depth: f64,
    /// Half-depth crossings left and right of the dip, volts.
    pub half_left: f64,
    pub half_right: f64,
}

impl DipShape {
    pub fn fwhm(&self) -> f64 {
        self.half_right - self.half_left
    }
}

fn crossing(v: &[f64], s: &[f64], i0: usize, level: f64, rightwards: bool) -> Option<f64> {
    let interp = |a: usize, b: usize| {
        let t = (level - s[a]) / (s[b] - s[a]);
        v[a] + t * (v[b] - v[a])
    };
    if rightwards {
        (i0 + 1..s.len()).find(|&i| s[i] >= level).map(|i| interp(i - 1, i))
    } else {
        (0..i0).rev().find(|&i| s[i] >= level).map(|i| interp(i + 1, i))
    }
}

/// Measures bottom, top, depth and half-depth crossings.
///
/// A scan of finite span never reaches the true off-resonance level of a Lorentzian, so
/// the top−bottom contrast is rescaled by `(1 + x²)/x²`, with `x` the normalized detuning
/// of the highest trace point. The half-depth level and the depth are iterated together.
pub fn dip_shape(trace: &ScanTrace) -> Result<DipShape> {
    let v = trace.v_dac();
    let s = smooth(&trace.v_adc());
    let i0 = dip_index(trace, &s)?;
    let v0 = v[i0];
    let bottom = s[i0];
    let i_top = argmax(&s);
    let top = s[i_top];
    let contrast = top - bottom;
    let mut depth = contrast;
    let mut cross = (f64::NAN, f64::NAN);
    for _ in 0..6 {
        let half = bottom + 0.5 * depth;
        let left = crossing(&v, &s, i0, half, false);
        let right = crossing(&v, &s, i0, half, true);
        let (Some(l), Some(r)) = (left, right) else {
            return Err(Error::Estimation(
                "half-depth level is not crossed on both sides of the dip".into(),
            ));
        };
        cross = (l, r);
        let x = 2.0 * (v[i_top] - v0) / (r - l);
        depth = contrast * (1.0 + x * x) / (x * x);
    }
    Ok(DipShape {
        v0,
        bottom,
        top,
        depth,
        half_left: cross.0,
        half_right: cross.1,
    })
}

/// Q = f_r / FWHM with the half-depth crossings converted to Hz.
pub fn estimate_q(trace: &ScanTrace, vco: &VcoConfig) -> Result<f64> {
    let shape = dip_shape(trace)?;
    q_from_shape(&shape, vco)
}

fn q_from_shape(shape: &DipShape, vco: &VcoConfig) -> Result<f64> {
    let fwhm = vco.eval(shape.half_right) - vco.eval(shape.half_left);
    if !(fwhm > 0.0) {
        return Err(Error::Estimation("non-positive FWHM".into()));
    }
    Ok(vco.eval(shape.v0) / fwhm)
}

/// Dip depth in ADC volts.
pub fn estimate_depth(trace: &ScanTrace) -> Result<f64> {
    Ok(dip_shape(trace)?.depth)
}

/// Resonance shift per unit permittivity per unit resonator area.
pub fn local_sensitivity(df_r_deps: f64, area: f64) -> Result<f64> {
    if !(area > 0.0) {
        return Err(Error::Domain(format!("area must be > 0, got {area}")));
    }
    Ok(df_r_deps / area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub am_coefficient: f64,
    pub k_window: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            am_coefficient: AM_COEFFICIENT,
            k_window: K_WINDOW,
        }
    }
}

/// Lock parameters and spectrum metrics derived from one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Dip DAC voltage.
    pub v0: f64,
    /// Modulation amplitude, DAC volts.
    pub a_m: f64,
    /// Loop gain K = 1/T″, DAC volts per unit of T′.
    pub k_gain: f64,
    pub q_est: f64,
    /// Dip depth, ADC volts.
    pub delta_t_est: f64,
    /// ADC level at the bottom of the dip.
    pub bottom: f64,
    /// Resonance frequency at `v0` via the tuning curve, Hz.
    pub f_r_est: f64,
    pub t_prime: Vec<(f64, f64)>,
}

impl CalibrationResult {
    /// ADC level halfway up the dip; the tracker treats readings above it as off-resonance.
    pub fn half_depth_level(&self) -> f64 {
        self.bottom + 0.5 * self.delta_t_est
    }

    /// Instant working band while locked at `v0`, Hz.
    pub fn instant_bandwidth(&self, vco: &VcoConfig) -> f64 {
        vco.eval(self.v0 + self.a_m) - vco.eval(self.v0 - self.a_m)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (key, value) in self.scalars() {
            writeln!(w, "# {key}={value}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["v_dac", "t_prime"])?;
        for (v, s) in &self.t_prime {
            out.write_record([v.to_string(), s.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let (meta, rows) = read_commented_csv(r)?;
        let t_prime = rows
            .iter()
            .map(|row| Ok((parse_field(row, 0)?, parse_field(row, 1)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            v0: meta_value(&meta, "v0")?,
            a_m: meta_value(&meta, "a_m")?,
            k_gain: meta_value(&meta, "k_gain")?,
            q_est: meta_value(&meta, "q_est")?,
            delta_t_est: meta_value(&meta, "delta_t_est")?,
            bottom: meta_value(&meta, "bottom")?,
            f_r_est: meta_value(&meta, "f_r_est")?,
            t_prime,
        })
    }

    pub fn scalars(&self) -> [(&'static str, f64); 7] {
        [
            ("v0", self.v0),
            ("a_m", self.a_m),
            ("k_gain", self.k_gain),
            ("q_est", self.q_est),
            ("delta_t_est", self.delta_t_est),
            ("bottom", self.bottom),
            ("f_r_est", self.f_r_est),
        ]
    }
}

/// Full calibration of one trace: V₀, A_m, K, Q and depth.
pub fn calibrate(trace: &ScanTrace, vco: &VcoConfig, cfg: &CalibConfig) -> Result<CalibrationResult> {
    if trace.len() < MIN_CALIBRATION_POINTS {
        return Err(Error::Trace(format!(
            "calibration needs at least {MIN_CALIBRATION_POINTS} points, got {}",
            trace.len()
        )));
    }
    let v0 = find_dip(trace)?;
    let t_prime = derivative(trace);
    let a_m = compute_am(&t_prime, v0, cfg.am_coefficient)?;
    let k_gain = compute_k(&t_prime, v0, a_m, cfg.k_window)?;
    let shape = dip_shape(trace)?;
    let q_est = q_from_shape(&shape, vco)?;
    Ok(CalibrationResult {
        v0,
        a_m,
        k_gain,
        q_est,
        delta_t_est: shape.depth,
        bottom: shape.bottom,
        f_r_est: vco.eval(v0),
        t_prime,
    })
}

/// Scan followed by [`calibrate`].
pub fn scan_and_calibrate(plant: &mut Plant, scan_cfg: &ScanConfig, cfg: &CalibConfig) -> Result<(ScanTrace, CalibrationResult)> {
    let trace = scan(plant, scan_cfg)?;
    let result = calibrate(&trace, &plant.config().vco, cfg)?;
    Ok((trace, result))
}

type Meta = Vec<(String, String)>;

fn read_commented_csv<R: BufRead>(r: R) -> Result<(Meta, Vec<csv::StringRecord>)> {
    let mut meta = Vec::new();
    let mut body = String::new();
    for line in r.lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
        } else {
            body.push_str(&line);
            body.push('\n');
        }
    }
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let rows = reader.records().collect::<Result<Vec<_>, _>>()?;
    Ok((meta, rows))
}

fn meta_value(meta: &Meta, key: &str) -> Result<f64> {
    meta.iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| Error::Trace(format!("missing metadata '{key}'")))?
        .1
        .parse()
        .map_err(|_| Error::Trace(format!("metadata '{key}' is not a number")))
}

fn parse_field(row: &csv::StringRecord, i: usize) -> Result<f64> {
    row.get(i)
        .ok_or_else(|| Error::Trace(format!("missing column {i}")))?
        .parse()
        .map_err(|_| Error::Trace(format!("column {i} is not a number")))
}
