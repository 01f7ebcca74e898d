//! Discrete dip-locking loop.
//!
//! Each square-wave iteration hops the DAC to `v_center + a_m` and `v_center − a_m`,
//! forms `e = (V⁺ − V⁻) / (2·a_m)` as the T′ estimate and moves the lock point by
//! `−k_i·e`. The integral accumulator is the superposition of every correction, so with
//! `k_p = k_d = 0` the update is `v_center ← v_center − k_i·e`.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::calib::{self, CalibConfig, CalibrationResult, ScanConfig};
use crate::error::{Error, Result};
use crate::plant::{Plant, PlantConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    #[default]
    Square,
    Sine,
}

/// Integral gain either as an absolute value or relative to the calibrated K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainSpec {
    Absolute(f64),
    FractionOfK(f64),
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec::FractionOfK(1.0)
    }
}

impl GainSpec {
    pub fn resolve(self, k: f64) -> f64 {
        match self {
            GainSpec::Absolute(v) => v,
            GainSpec::FractionOfK(f) => f * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub k_i: f64,
    pub k_p: f64,
    pub k_d: f64,
    pub a_m: f64,
    pub modulation: Modulation,
    pub sine_samples_per_period: usize,
    /// A single correction larger than this multiple of `a_m` flags loss of lock.
    pub lock_loss_step_limit: f64,
    /// Mean ADC level above which the pair of readings is considered off-resonance.
    pub lock_level: Option<f64>,
    /// Consecutive off-resonance iterations tolerated before flagging loss of lock.
    pub lock_level_window: usize,
    /// Consecutive saturated ADC samples tolerated before flagging loss of lock.
    pub saturation_limit: usize,
    /// DAC voltages the loop may drive.
    pub dac_range: [f64; 2],
    /// Output pacing for the service, points per second.
    pub point_rate: f64,
}

pub const DEFAULT_POINT_RATE: f64 = 2272.0;

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            k_i: 1.0,
            k_p: 0.0,
            k_d: 0.0,
            a_m: 0.01,
            modulation: Modulation::Square,
            sine_samples_per_period: 16,
            lock_loss_step_limit: 5.0,
            lock_level: None,
            lock_level_window: 8,
            saturation_limit: 100,
            dac_range: [0.0, 3.3],
            point_rate: DEFAULT_POINT_RATE,
        }
    }
}

impl TrackerConfig {
    pub fn from_calibration(cal: &CalibrationResult, gain: GainSpec, plant: &PlantConfig) -> Result<Self> {
        let cfg = Self {
            k_i: gain.resolve(cal.k_gain),
            a_m: cal.a_m,
            lock_level: Some(cal.half_depth_level()),
            dac_range: plant.dac_range(),
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_modulation(mut self, modulation: Modulation) -> Self {
        self.modulation = modulation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_i > 0.0 && self.k_i.is_finite()) {
            return Err(Error::Parameter(format!("k_i must be > 0, got {}", self.k_i)));
        }
        if !(self.a_m > 0.0 && self.a_m.is_finite()) {
            return Err(Error::Parameter(format!("a_m must be > 0, got {}", self.a_m)));
        }
        if !(self.k_p.is_finite() && self.k_d.is_finite()) {
            return Err(Error::Parameter("k_p and k_d must be finite".into()));
        }
        let n = self.sine_samples_per_period;
        if n < 4 || n % 2 != 0 {
            return Err(Error::Parameter(format!(
                "sine_samples_per_period must be even and >= 4, got {n}"
            )));
        }
        if !(self.lock_loss_step_limit > 0.0) {
            return Err(Error::Parameter("lock_loss_step_limit must be > 0".into()));
        }
        if !(self.point_rate > 0.0) {
            return Err(Error::Parameter("point_rate must be > 0".into()));
        }
        Ok(())
    }

    /// Plant samples consumed per tracker point.
    pub fn samples_per_point(&self) -> usize {
        match self.modulation {
            Modulation::Square => 2,
            Modulation::Sine => self.sine_samples_per_period,
        }
    }

    fn in_range(&self, v_center: f64) -> bool {
        v_center - self.a_m >= self.dac_range[0] && v_center + self.a_m <= self.dac_range[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    /// Current lock point, DAC volts.
    pub v_center: f64,
    /// Sum of all integral corrections.
    pub integral_acc: f64,
    pub locked: bool,
    pub iteration: u64,
    /// Lock point at initialization.
    pub origin: f64,
    prev_error: f64,
    saturated_run: usize,
    off_level_run: usize,
}

impl TrackerState {
    pub fn at(v0: f64) -> Self {
        Self {
            v_center: v0,
            integral_acc: 0.0,
            locked: true,
            iteration: 0,
            origin: v0,
            prev_error: 0.0,
            saturated_run: 0,
            off_level_run: 0,
        }
    }

    pub fn unlocked(v0: f64) -> Self {
        Self {
            locked: false,
            ..Self::at(v0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerSample {
    pub iteration: u64,
    /// Lock point after this iteration's correction, DAC volts.
    pub v_out: f64,
    /// T′ estimate, ADC volts per DAC volt.
    pub error: f64,
    pub locked: bool,
    pub saturated: bool,
    /// Mean ADC reading over the modulation period.
    #[serde(default)]
    pub level: f64,
}

struct Measurement {
    error: f64,
    level: f64,
    saturated: usize,
    saturated_tail: usize,
}

/// Loss-of-lock rule for a fresh sample, given run counters already updated in `state`.
///
/// Unlocked when the correction `|k_i·e|` strictly exceeds `lock_loss_step_limit·a_m`,
/// when `v_center ± a_m` leaves the DAC range, after `saturation_limit` consecutive
/// saturated conversions, or after `lock_level_window` consecutive off-resonance levels.
pub fn detect_lock_loss(state: &TrackerState, config: &TrackerConfig, sample: &TrackerSample) -> bool {
    let step = (config.k_i * sample.error).abs();
    step > config.lock_loss_step_limit * config.a_m
        || !config.in_range(state.v_center)
        || state.saturated_run >= config.saturation_limit
        || state.off_level_run >= config.lock_level_window.max(1)
}

#[derive(Debug, Clone)]
pub struct Tracker {
    pub config: TrackerConfig,
    pub state: TrackerState,
}

impl Tracker {
    pub fn new(config: TrackerConfig, state: TrackerState) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state })
    }

    /// Locks at the calibrated dip with the calibrated A_m and `gain` applied to K.
    pub fn from_calibration(cal: &CalibrationResult, gain: GainSpec, plant: &PlantConfig) -> Result<Self> {
        Self::new(TrackerConfig::from_calibration(cal, gain, plant)?, TrackerState::at(cal.v0))
    }

    pub fn step(&mut self, plant: &mut Plant) -> TrackerSample {
        match self.config.modulation {
            Modulation::Square => self.step_square(plant),
            Modulation::Sine => self.step_sine(plant),
        }
    }

    /// Two-point square-wave iteration: `+a_m` first, then `−a_m`.
    pub fn step_square(&mut self, plant: &mut Plant) -> TrackerSample {
        let a_m = self.config.a_m;
        let offsets = [a_m, -a_m];
        self.iterate(plant, &offsets, |readings| (readings[0] - readings[1]) / (2.0 * a_m))
    }

    /// Sinusoidal reference: N points per period demodulated against the drive.
    ///
    /// `e = 2/(a_m·N) · Σ V_n sin(2πn/N)`; for a locally linear response of slope s this
    /// equals s, the same small-signal slope as [`Tracker::step_square`].
    pub fn step_sine(&mut self, plant: &mut Plant) -> TrackerSample {
        let a_m = self.config.a_m;
        let n = self.config.sine_samples_per_period;
        let phases: Vec<f64> = (0..n)
            .map(|k| (std::f64::consts::TAU * k as f64 / n as f64).sin())
            .collect();
        let offsets: Vec<f64> = phases.iter().map(|s| a_m * s).collect();
        self.iterate(plant, &offsets, |readings| {
            let acc: f64 = readings.iter().zip(&phases).map(|(v, s)| v * s).sum();
            2.0 * acc / (a_m * n as f64)
        })
    }

    fn measure(
        plant: &mut Plant,
        v_center: f64,
        offsets: &[f64],
        demod: impl Fn(&[f64]) -> f64,
    ) -> Result<Measurement> {
        let mut readings = Vec::with_capacity(offsets.len());
        let mut saturated = 0;
        let mut tail = 0;
        for (taken, off) in offsets.iter().enumerate() {
            let s = match plant.sample_adc(v_center + off) {
                Ok(s) => s,
                Err(e) => {
                    plant.skip((offsets.len() - taken - 1) as u64);
                    return Err(e);
                }
            };
            if s.saturated {
                saturated += 1;
                tail += 1;
            } else {
                tail = 0;
            }
            readings.push(s.volts);
        }
        let level = readings.iter().sum::<f64>() / readings.len() as f64;
        Ok(Measurement {
            error: demod(&readings),
            level,
            saturated,
            saturated_tail: tail,
        })
    }

    fn iterate(&mut self, plant: &mut Plant, offsets: &[f64], demod: impl Fn(&[f64]) -> f64) -> TrackerSample {
        let cfg = &self.config;
        let st = &mut self.state;
        st.iteration += 1;

        if !cfg.in_range(st.v_center) {
            plant.skip(offsets.len() as u64);
            st.locked = false;
            return TrackerSample {
                iteration: st.iteration,
                v_out: st.v_center,
                error: 0.0,
                locked: false,
                saturated: false,
                level: f64::NAN,
            };
        }

        let m = match Self::measure(plant, st.v_center, offsets, demod) {
            Ok(m) => m,
            Err(_) => {
                st.locked = false;
                return TrackerSample {
                    iteration: st.iteration,
                    v_out: st.v_center,
                    error: 0.0,
                    locked: false,
                    saturated: false,
                    level: f64::NAN,
                };
            }
        };

        if m.saturated == offsets.len() {
            st.saturated_run += m.saturated;
        } else {
            st.saturated_run = m.saturated_tail;
        }
        match cfg.lock_level {
            Some(limit) if m.level > limit => st.off_level_run += 1,
            _ => st.off_level_run = 0,
        }

        st.integral_acc += cfg.k_i * m.error;
        let pd = cfg.k_p * m.error + cfg.k_d * (m.error - st.prev_error);
        st.prev_error = m.error;
        let mut v_center = st.origin - st.integral_acc - pd;
        let [lo, hi] = cfg.dac_range;
        if !cfg.in_range(v_center) {
            v_center = v_center.clamp(lo + cfg.a_m, (hi - cfg.a_m).max(lo + cfg.a_m));
            st.integral_acc = st.origin - v_center - pd;
            st.locked = false;
        }
        st.v_center = v_center;

        let mut sample = TrackerSample {
            iteration: st.iteration,
            v_out: st.v_center,
            error: m.error,
            locked: st.locked,
            saturated: m.saturated > 0,
            level: m.level,
        };
        if detect_lock_loss(st, cfg, &sample) {
            st.locked = false;
        }
        sample.locked = st.locked;
        sample
    }

    /// Emits exactly `points` samples to `sink`.
    pub fn run(&mut self, points: usize, plant: &mut Plant, sink: &mut impl SampleSink) {
        for _ in 0..points {
            let s = self.step(plant);
            sink.push(s);
        }
    }

    /// Collects `points` samples into a vector.
    pub fn run_collect(&mut self, points: usize, plant: &mut Plant) -> Vec<TrackerSample> {
        let mut out = Vec::with_capacity(points);
        self.run(points, plant, &mut out);
        out
    }

    /// Rescan and recalibrate, then restart the loop at the new dip.
    ///
    /// `gain` is applied to the fresh K; the previous integral accumulator is discarded.
    /// On failure the tracker is left unlocked and the error is returned.
    pub fn relock(
        &mut self,
        plant: &mut Plant,
        scan_cfg: &ScanConfig,
        calib_cfg: &CalibConfig,
        gain: GainSpec,
    ) -> Result<CalibrationResult> {
        match relock(plant, scan_cfg, calib_cfg, gain, &self.config) {
            Ok((cal, config, state)) => {
                self.config = config;
                self.state = state;
                Ok(cal)
            }
            Err(e) => {
                self.state.locked = false;
                Err(e)
            }
        }
    }
}

/// Scan → calibrate → fresh tracker state at the new V₀ with fresh A_m and K.
///
/// Settings not derived from calibration (modulation, PD gains, limits, pacing) are
/// carried over from `template`.
pub fn relock(
    plant: &mut Plant,
    scan_cfg: &ScanConfig,
    calib_cfg: &CalibConfig,
    gain: GainSpec,
    template: &TrackerConfig,
) -> Result<(CalibrationResult, TrackerConfig, TrackerState)> {
    let (_, cal) = calib::scan_and_calibrate(plant, scan_cfg, calib_cfg)?;
    let fresh = TrackerConfig::from_calibration(&cal, gain, plant.config())?;
    let config = TrackerConfig {
        k_i: fresh.k_i,
        a_m: fresh.a_m,
        lock_level: fresh.lock_level,
        dac_range: fresh.dac_range,
        ..template.clone()
    };
    config.validate()?;
    let state = TrackerState::at(cal.v0);
    Ok((cal, config, state))
}

/// Destination for tracker samples.
pub trait SampleSink {
    fn push(&mut self, sample: TrackerSample);
}

impl SampleSink for Vec<TrackerSample> {
    fn push(&mut self, sample: TrackerSample) {
        Vec::push(self, sample);
    }
}

#[derive(Debug)]
struct Ring {
    buf: VecDeque<TrackerSample>,
    capacity: usize,
    dropped: u64,
}

/// Bounded, shareable sample buffer that drops the oldest entry when full.
///
/// Clones share the same buffer, so one clone can be handed to a consumer thread.
#[derive(Debug, Clone)]
pub struct BoundedSink {
    inner: Arc<Mutex<Ring>>,
}

impl BoundedSink {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Ring {
                buf: VecDeque::with_capacity(capacity.max(1)),
                capacity: capacity.max(1),
                dropped: 0,
            })),
        }
    }

    pub fn drain(&self) -> Vec<TrackerSample> {
        let mut ring = self.inner.lock().expect("sink poisoned");
        ring.buf.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("sink poisoned").buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.inner.lock().expect("sink poisoned").dropped
    }
}

impl SampleSink for BoundedSink {
    fn push(&mut self, sample: TrackerSample) {
        let mut ring = self.inner.lock().expect("sink poisoned");
        if ring.buf.len() == ring.capacity {
            ring.buf.pop_front();
            ring.dropped += 1;
        }
        ring.buf.push_back(sample);
    }
}

/// Run log: `iteration,v_out,error,locked,saturated`.
pub fn write_run_csv<W: Write>(samples: &[TrackerSample], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "v_out", "error", "locked", "saturated"])?;
    for s in samples {
        out.write_record([
            s.iteration.to_string(),
            s.v_out.to_string(),
            s.error.to_string(),
            s.locked.to_string(),
            s.saturated.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_run_csv<R: BufRead>(r: R) -> Result<Vec<TrackerSample>> {
    let mut reader = csv::Reader::from_reader(r);
    reader
        .records()
        .map(|row| {
            let row = row?;
            let field = |i: usize| {
                row.get(i)
                    .ok_or_else(|| Error::Parameter(format!("run log row missing column {i}")))
            };
            let bad = |what: &str| Error::Parameter(format!("run log has a malformed {what}"));
            Ok(TrackerSample {
                iteration: field(0)?.parse().map_err(|_| bad("iteration"))?,
                v_out: field(1)?.parse().map_err(|_| bad("v_out"))?,
                error: field(2)?.parse().map_err(|_| bad("error"))?,
                locked: field(3)?.parse().map_err(|_| bad("locked flag"))?,
                saturated: field(4)?.parse().map_err(|_| bad("saturated flag"))?,
                level: f64::NAN,
            })
        })
        .collect()
}
