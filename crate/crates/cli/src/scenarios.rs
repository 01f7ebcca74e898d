//! Closed-loop simulations behind the experiments and the acceptance suite.

use rayon::prelude::*;
use resotrack_core::calib::{self, CalibConfig, CalibrationResult, ScanConfig, ScanTrace};
use resotrack_core::dsp::{self, GaussianityReport};
use resotrack_core::plant::{EmiConfig, Plant, PlantConfig, StimulusDomain, StimulusProgram};
use resotrack_core::tracker::{GainSpec, Modulation, Tracker, TrackerSample, TrackerState};
use resotrack_core::{Error, Result};

/// Noise-free plant with 24-bit converters, close to the continuous line shape.
pub fn analytic_plant() -> PlantConfig {
    PlantConfig::ideal().with_bits(24)
}

/// Scan the plant with `scan_cfg` (default: full range) and calibrate.
pub fn calibrate_plant(plant: &mut Plant, scan_cfg: Option<&ScanConfig>) -> Result<(ScanTrace, CalibrationResult)> {
    let default = ScanConfig::full_range(plant.config(), calib::DEFAULT_SCAN_POINTS, 4);
    calib::scan_and_calibrate(plant, scan_cfg.unwrap_or(&default), &CalibConfig::default())
}

/// Noise-free dip voltage of the plant's current resonance.
pub fn true_dip(plant: &Plant) -> Result<f64> {
    plant
        .dip_voltage()
        .ok_or_else(|| Error::Range("resonance is outside the VCO tuning range".into()))
}

/// Resonance offset in Hz equivalent to `dv` DAC volts at `v`.
fn hz_for(plant: &PlantConfig, v: f64, dv: f64) -> f64 {
    plant.vco.eval(v + dv) - plant.vco.eval(v)
}

/// Residuals `|v_out − dip| / |d|` after each of `steps` iterations, for a resonance
/// stepped by `detuning_am·A_m` with the loop sitting on the old dip.
pub fn step_residuals(plant_cfg: &PlantConfig, detuning_am: f64, gain: GainSpec, steps: usize) -> Result<Vec<f64>> {
    let mut probe = Plant::new(plant_cfg.clone())?;
    let (_, cal) = calibrate_plant(&mut probe, None)?;
    let dip0 = true_dip(&probe)?;
    let d = detuning_am * cal.a_m;
    let shifted = plant_cfg.clone().with_stimulus(StimulusProgram::step(
        StimulusDomain::Frequency,
        0.0,
        1e9,
        hz_for(plant_cfg, dip0, d),
    ));
    let mut plant = Plant::new(shifted)?;
    let target = true_dip(&plant)?;
    let mut tracker = Tracker::from_calibration(&cal, gain, plant.config())?;
    tracker.state = TrackerState::at(dip0);
    let step = (target - dip0).abs();
    Ok((0..steps)
        .map(|_| (tracker.step_square(&mut plant).v_out - target).abs() / step)
        .collect())
}

/// Locks on a calibrated plant and returns the v_out series after `settle` points.
pub fn track_series(plant_cfg: &PlantConfig, gain: GainSpec, settle: usize, points: usize) -> Result<Vec<TrackerSample>> {
    let mut plant = Plant::new(plant_cfg.clone())?;
    let (_, cal) = calibrate_plant(&mut plant, None)?;
    let mut tracker = Tracker::from_calibration(&cal, gain, plant.config())?;
    tracker.run_collect(settle, &mut plant);
    Ok(tracker.run_collect(points, &mut plant))
}

pub fn v_out(samples: &[TrackerSample]) -> Vec<f64> {
    samples.iter().map(|s| s.v_out).collect()
}

#[derive(Debug, Clone)]
pub struct SnrRow {
    pub seed: u64,
    pub fraction: f64,
    pub snr_db: f64,
    pub filtered_snr_db: f64,
}

/// Window of the median filter applied to tracker output (odd, as the filter requires).
pub const MEDIAN_WINDOW: usize = 301;

/// Display smoothing window.
pub const SMOOTH_WINDOW: usize = 3001;

/// SNR of v_out, raw and median-filtered, for every seed and gain fraction.
pub fn snr_vs_ki(plant_cfg: &PlantConfig, fractions: &[f64], seeds: &[u64], settle: usize, points: usize) -> Result<Vec<SnrRow>> {
    let jobs: Vec<(u64, f64)> = seeds
        .iter()
        .flat_map(|&s| fractions.iter().map(move |&f| (s, f)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, fraction)| {
            let cfg = plant_cfg.clone().with_seed(seed);
            let v = v_out(&track_series(&cfg, GainSpec::FractionOfK(fraction), settle, points)?);
            let filtered = dsp::median_filter(&v, MEDIAN_WINDOW)?;
            Ok(SnrRow {
                seed,
                fraction,
                snr_db: dsp::snr(&v)?,
                filtered_snr_db: dsp::snr(&filtered)?,
            })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over seeds of `pick(row)` for one gain fraction.
pub fn median_for(rows: &[SnrRow], fraction: f64, pick: impl Fn(&SnrRow) -> f64) -> f64 {
    let mut v: Vec<f64> = rows.iter().filter(|r| r.fraction == fraction).map(pick).collect();
    median(&mut v)
}

#[derive(Debug, Clone)]
pub struct NoiseCharacter {
    pub report: GaussianityReport,
    pub psd: Vec<(f64, f64)>,
    pub decade_contrast_db: f64,
}

pub fn noise_character(plant_cfg: &PlantConfig, fraction: f64, settle: usize, points: usize, point_rate: f64) -> Result<NoiseCharacter> {
    let v = v_out(&track_series(plant_cfg, GainSpec::FractionOfK(fraction), settle, points)?);
    let report = dsp::gaussianity(&v)?;
    let psd = dsp::psd(&v, point_rate)?;
    let decade_contrast_db = dsp::decade_contrast_db(&psd)
        .ok_or_else(|| Error::Parameter("spectrum too short for decade bands".into()))?;
    Ok(NoiseCharacter {
        report,
        psd,
        decade_contrast_db,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ModulationPoint {
    pub detuning: f64,
    pub square: f64,
    pub sine: f64,
}

impl ModulationPoint {
    pub fn ratio(&self) -> f64 {
        self.square / self.sine
    }
}

/// Square-wave and sinusoidal error signals at `dip + d` for each detuning in A_m units.
pub fn modulation_sweep(plant_cfg: &PlantConfig, detunings_am: &[f64]) -> Result<Vec<ModulationPoint>> {
    let mut plant = Plant::new(plant_cfg.clone())?;
    let (_, cal) = calibrate_plant(&mut plant, None)?;
    let dip = true_dip(&plant)?;
    detunings_am
        .iter()
        .map(|&x| {
            let d = x * cal.a_m;
            let mut t = Tracker::from_calibration(&cal, GainSpec::FractionOfK(1.0), plant.config())?;
            let mut err = |modulation| {
                t.config.modulation = modulation;
                t.state = TrackerState::at(dip + d);
                t.step(&mut plant).error
            };
            let square = err(Modulation::Square);
            let sine = err(Modulation::Sine);
            Ok(ModulationPoint {
                detuning: d,
                square,
                sine,
            })
        })
        .collect()
}

/// Mean `dip − v_out` over the last `window` of `points` iterations while the resonance
/// ramps at `slope` Hz/s.
pub fn ramp_lag(plant_cfg: &PlantConfig, fraction: f64, slope: f64, points: usize, window: usize) -> Result<f64> {
    let mut plant = Plant::new(plant_cfg.clone())?;
    let (_, cal) = calibrate_plant(&mut plant, None)?;
    let start = plant.time();
    let duration = 10.0 * points as f64 / plant.config().sample_rate + 1.0;
    plant.set_stimulus(StimulusProgram::ramp(StimulusDomain::Frequency, start, duration, slope * duration))?;
    let mut tracker = Tracker::from_calibration(&cal, GainSpec::FractionOfK(fraction), plant.config())?;
    let mut acc = 0.0;
    for i in 0..points {
        let s = tracker.step_square(&mut plant);
        if !s.locked {
            return Err(Error::Parameter(format!("lock lost during ramp at point {i}")));
        }
        if i >= points - window {
            acc += true_dip(&plant)? - s.v_out;
        }
    }
    Ok(acc / window as f64)
}

#[derive(Debug, Clone)]
pub struct PulseResponse {
    pub magnitude: f64,
    /// Mean v_out over the second half of the pulse minus the baseline, volts.
    pub excursion: f64,
    /// Mean v_out over the last quarter of the following rest minus the baseline, volts.
    pub recovery: f64,
}

/// Permittivity pulses of `width` seconds separated by equal rests, tracked at `fraction`·K.
pub fn acetone_pulses(plant_cfg: &PlantConfig, magnitudes: &[f64], width: f64, fraction: f64) -> Result<(Vec<PulseResponse>, Vec<TrackerSample>)> {
    let mut plant = Plant::new(plant_cfg.clone())?;
    let (_, cal) = calibrate_plant(&mut plant, None)?;
    let rate = plant.config().sample_rate / 2.0;
    let per = (width * rate).round() as usize;
    let start = plant.time() + width;
    plant.set_stimulus(StimulusProgram::pulses(StimulusDomain::Permittivity, start, width, magnitudes))?;
    let mut tracker = Tracker::from_calibration(&cal, GainSpec::FractionOfK(fraction), plant.config())?;
    let samples = tracker.run_collect(per * (1 + 2 * magnitudes.len()), &mut plant);
    let v = v_out(&samples);
    let mean = |a: usize, b: usize| v[a..b].iter().sum::<f64>() / (b - a) as f64;
    let baseline = mean(per / 2, per);
    let responses = magnitudes
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let p0 = per * (1 + 2 * k);
            PulseResponse {
                magnitude: m,
                excursion: mean(p0 + per / 2, p0 + per) - baseline,
                recovery: mean(p0 + 2 * per - per / 4, p0 + 2 * per) - baseline,
            }
        })
        .collect();
    Ok((responses, samples))
}

/// Plateau means of v_out minus the pre-stimulus level for an increasing staircase.
pub fn acetone_staircase(plant_cfg: &PlantConfig, increment: f64, steps: usize, dwell: f64, fraction: f64) -> Result<(Vec<f64>, Vec<TrackerSample>)> {
    let mut plant = Plant::new(plant_cfg.clone())?;
    let (_, cal) = calibrate_plant(&mut plant, None)?;
    let rate = plant.config().sample_rate / 2.0;
    let per = (dwell * rate).round() as usize;
    let start = plant.time() + dwell;
    plant.set_stimulus(StimulusProgram::staircase(StimulusDomain::Permittivity, start, dwell, increment, steps))?;
    let mut tracker = Tracker::from_calibration(&cal, GainSpec::FractionOfK(fraction), plant.config())?;
    let samples = tracker.run_collect(per * (1 + steps), &mut plant);
    let v = v_out(&samples);
    let mean = |a: usize, b: usize| v[a..b].iter().sum::<f64>() / (b - a) as f64;
    let base = mean(per / 2, per);
    let plateaus = (1..=steps).map(|k| mean(per * k + per / 2, per * (k + 1)) - base).collect();
    Ok((plateaus, samples))
}

/// v_out SNR with interference off and on, same seed.
pub fn emi_pair(plant_cfg: &PlantConfig, emi: &EmiConfig, fraction: f64, settle: usize, points: usize) -> Result<(f64, f64)> {
    let mut quiet = plant_cfg.clone();
    quiet.emi.enabled = false;
    let mut noisy = plant_cfg.clone();
    noisy.emi = EmiConfig {
        enabled: true,
        ..emi.clone()
    };
    let gain = GainSpec::FractionOfK(fraction);
    let off = dsp::snr(&v_out(&track_series(&quiet, gain, settle, points)?))?;
    let on = dsp::snr(&v_out(&track_series(&noisy, gain, settle, points)?))?;
    Ok((off, on))
}

/// EMI amplitude that brings a constant-input ADC stream to `target_std` given the
/// thermal and quantization noise already present.
pub fn emi_amplitude_for_std(plant_cfg: &PlantConfig, target_std: f64) -> f64 {
    let lsb = plant_cfg.quantizer.lsb();
    let base = plant_cfg.detector.noise_std.powi(2) + lsb * lsb / 12.0;
    (2.0 * (target_std * target_std - base)).max(0.0).sqrt()
}

#[derive(Debug, Clone)]
pub struct RelockOutcome {
    /// Iterations after the jump until the tracker reported loss of lock.
    pub flagged_after: Option<usize>,
    pub dip_before: f64,
    pub dip_after: f64,
    pub recalibrated: CalibrationResult,
    /// `|v_center − dip|` right after relock, volts.
    pub error: f64,
    /// `|v_out − dip|` after `settle` further iterations, volts.
    pub settled_error: f64,
}

/// Locks, jumps the resonance by `jump_am·A_m`, waits for loss of lock and relocks.
pub fn relock_after_jump(plant_cfg: &PlantConfig, jump_am: f64, max_wait: usize, settle: usize) -> Result<RelockOutcome> {
    let mut plant = Plant::new(plant_cfg.clone())?;
    let (_, cal) = calibrate_plant(&mut plant, None)?;
    let dip_before = true_dip(&plant)?;
    let mut tracker = Tracker::from_calibration(&cal, GainSpec::FractionOfK(1.0), plant.config())?;
    tracker.run_collect(200, &mut plant);
    let jump = hz_for(plant.config(), dip_before, jump_am * cal.a_m);
    plant.set_stimulus(StimulusProgram::step(StimulusDomain::Frequency, plant.time(), 1e9, jump))?;
    let dip_after = true_dip(&plant)?;
    let flagged_after = (1..=max_wait).find(|_| !tracker.step(&mut plant).locked);
    let scan_cfg = ScanConfig::full_range(plant.config(), calib::DEFAULT_SCAN_POINTS, 4);
    let recalibrated = tracker.relock(&mut plant, &scan_cfg, &CalibConfig::default(), GainSpec::FractionOfK(1.0))?;
    let error = (tracker.state.v_center - dip_after).abs();
    let tail = tracker.run_collect(settle, &mut plant);
    let settled_error = tail.last().map_or(error, |s| (s.v_out - dip_after).abs());
    Ok(RelockOutcome {
        flagged_after,
        dip_before,
        dip_after,
        recalibrated,
        error,
        settled_error,
    })
}
