use serde::{Deserialize, Serialize};

use super::stimulus::StimulusProgram;
use crate::error::{Error, Result};

/// Resonator line-shape parameters and its permittivity transduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResonatorConfig {
    /// Nominal resonance frequency, Hz.
    pub f_r0: f64,
    pub q_factor: f64,
    /// Resonance intensity: depth of the transmittance dip.
    pub delta_t: f64,
    /// Off-resonance transmittance.
    pub baseline: f64,
    /// Resonance shift per unit relative permittivity, Hz (signed).
    pub sensitivity: f64,
    /// Resonator footprint, m².
    pub area: f64,
}

/// Diameter of the plasmonic resonator footprint, m.
pub const RESONATOR_DIAMETER: f64 = 4.3e-3;

impl Default for ResonatorConfig {
    fn default() -> Self {
        let radius = RESONATOR_DIAMETER / 2.0;
        Self {
            f_r0: 4.92e9,
            q_factor: 103.2,
            delta_t: 0.44,
            baseline: 1.0,
            sensitivity: -100e6,
            area: std::f64::consts::PI * radius * radius,
        }
    }
}

/// Voltage-controlled oscillator tuning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VcoConfig {
    /// Polynomial coefficients, constant term first: f(v) = Σ c_k v^k (Hz).
    pub tuning: Vec<f64>,
    /// Allowed tuning-port voltage range [v_min, v_max].
    pub v_range: [f64; 2],
    /// Per-sample white Gaussian frequency jitter, Hz.
    pub jitter_std: f64,
}

impl Default for VcoConfig {
    fn default() -> Self {
        Self {
            tuning: vec![4.6e9, 200e6],
            v_range: [0.0, 3.3],
            jitter_std: 0.0,
        }
    }
}

impl VcoConfig {
    /// Noise-free tuning curve evaluation (Horner).
    pub fn eval(&self, v: f64) -> f64 {
        self.tuning.iter().rev().fold(0.0, |acc, c| acc * v + c)
    }

    /// df/dv of the tuning polynomial.
    pub fn slope(&self, v: f64) -> f64 {
        self.tuning
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * v + k as f64 * c)
    }

    /// Tuning voltage producing `f`, or `None` when `f` is outside the tuning range.
    pub fn voltage_for(&self, f: f64) -> Option<f64> {
        let [mut lo, mut hi] = self.v_range;
        if f < self.eval(lo) || f > self.eval(hi) {
            return None;
        }
        // bisection; the curve is monotone by construction
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) < f {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }

    fn validate(&self) -> Result<()> {
        if self.tuning.is_empty() || self.tuning.len() > 4 {
            return Err(Error::Config(format!(
                "vco tuning must have 1..=4 coefficients, got {}",
                self.tuning.len()
            )));
        }
        if self.tuning.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("vco tuning coefficients must be finite".into()));
        }
        let [v_min, v_max] = self.v_range;
        if !(v_min.is_finite() && v_max.is_finite() && v_min < v_max) {
            return Err(Error::Config(format!(
                "vco v_range must satisfy v_min < v_max, got [{v_min}, {v_max}]"
            )));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::Config("vco jitter_std must be >= 0".into()));
        }
        const GRID: usize = 1024;
        let mut prev = self.eval(v_min);
        for i in 1..=GRID {
            let v = v_min + (v_max - v_min) * i as f64 / GRID as f64;
            let f = self.eval(v);
            if f <= prev || self.slope(v) <= 0.0 {
                return Err(Error::Config(format!(
                    "vco tuning is not strictly increasing near {v:.4} V"
                )));
            }
            prev = f;
        }
        if self.eval(v_min) <= 0.0 {
            return Err(Error::Config("vco tuning must produce positive frequencies".into()));
        }
        Ok(())
    }
}

/// Diode detector response from transmittance to volts at the ADC input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub gain: f64,
    pub offset: f64,
    /// White Gaussian thermal noise at the ADC input, volts.
    pub noise_std: f64,
    /// Quadratic term, volts per unit transmittance squared.
    pub nonlinearity: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            gain: 2.4,
            offset: 0.0,
            noise_std: 0.0,
            nonlinearity: 0.0,
        }
    }
}

impl DetectorConfig {
    /// Noise-free detector voltage for transmittance `t`.
    pub fn respond(&self, t: f64) -> f64 {
        self.gain * t + self.offset + self.nonlinearity * t * t
    }
}

/// Shared DAC/ADC converter resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub bits: u32,
    pub full_scale: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            bits: 12,
            full_scale: 3.3,
        }
    }
}

impl QuantizerConfig {
    pub fn lsb(&self) -> f64 {
        self.full_scale / (1u64 << self.bits) as f64
    }

    pub fn max_code(&self) -> u32 {
        ((1u64 << self.bits) - 1) as u32
    }

    /// Largest representable voltage.
    pub fn max_voltage(&self) -> f64 {
        self.max_code() as f64 * self.lsb()
    }

    /// Nearest converter code, clamped to the code range. The flag is set when clamping occurred.
    pub fn code(&self, v: f64) -> (u32, bool) {
        let raw = (v / self.lsb()).round();
        if raw < 0.0 {
            (0, true)
        } else if raw > self.max_code() as f64 {
            (self.max_code(), true)
        } else {
            (raw as u32, false)
        }
    }

    pub fn quantize(&self, v: f64) -> (f64, bool) {
        let (code, clipped) = self.code(v);
        (code as f64 * self.lsb(), clipped)
    }

    fn validate(&self) -> Result<()> {
        if !(1..=24).contains(&self.bits) {
            return Err(Error::Config(format!(
                "quantizer bits must be in 1..=24, got {}",
                self.bits
            )));
        }
        if !(self.full_scale > 0.0 && self.full_scale.is_finite()) {
            return Err(Error::Config("quantizer full_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Additive interference at the ADC input.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmiConfig {
    pub enabled: bool,
    pub amplitude: f64,
    /// Frequency of the interference as seen in the sampled voltage, Hz.
    pub frequency: f64,
    pub phase: f64,
}

/// Complete plant description; every section is optional in the JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub resonator: ResonatorConfig,
    pub vco: VcoConfig,
    pub detector: DetectorConfig,
    pub quantizer: QuantizerConfig,
    pub stimulus: StimulusProgram,
    pub emi: EmiConfig,
    pub seed: u64,
    /// ADC conversions per second; maps sample indices onto the stimulus clock.
    pub sample_rate: f64,
}

/// Two ADC conversions per tracking point at the bench point rate.
pub const DEFAULT_SAMPLE_RATE: f64 = 2.0 * 2272.0;

/// SNR of the thermal noise at the ADC input for the hardware profile, dB.
pub const HARDWARE_ADC_SNR_DB: f64 = 67.0;

/// VCO frequency jitter of the hardware profile, Hz.
pub const HARDWARE_JITTER_STD: f64 = 1.0e6;

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            resonator: ResonatorConfig::default(),
            vco: VcoConfig::default(),
            detector: DetectorConfig::default(),
            quantizer: QuantizerConfig::default(),
            stimulus: StimulusProgram::default(),
            emi: EmiConfig::default(),
            seed: 0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// Named starting points for a plant configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantProfile {
    /// Simulated line shape (Q = 103.2), noise off.
    Ideal,
    /// Measured line shape (Q = 18.5) with 67 dB thermal noise and VCO jitter.
    Hardware,
}

impl std::str::FromStr for PlantProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Self::Ideal),
            "hardware" => Ok(Self::Hardware),
            other => Err(Error::Config(format!("unknown plant profile '{other}'"))),
        }
    }
}

impl PlantConfig {
    pub fn profile(profile: PlantProfile) -> Self {
        match profile {
            PlantProfile::Ideal => Self::ideal(),
            PlantProfile::Hardware => Self::hardware(),
        }
    }

    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn hardware() -> Self {
        let mut cfg = Self::default();
        cfg.resonator.q_factor = 18.5;
        cfg.vco.jitter_std = HARDWARE_JITTER_STD;
        cfg.calibrate_thermal_noise(HARDWARE_ADC_SNR_DB);
        cfg
    }

    /// Disables thermal noise, jitter and interference.
    pub fn noiseless(mut self) -> Self {
        self.detector.noise_std = 0.0;
        self.vco.jitter_std = 0.0;
        self.emi.enabled = false;
        self
    }

    pub fn with_bits(mut self, bits: u32) -> Self {
        self.quantizer.bits = bits;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_stimulus(mut self, program: StimulusProgram) -> Self {
        self.stimulus = program;
        self
    }

    /// Noise-free ADC input voltage at the bottom of the dip.
    pub fn dip_level(&self) -> f64 {
        let r = &self.resonator;
        self.detector.respond(r.baseline - r.delta_t)
    }

    /// Sets the detector noise so a constant-voltage ADC stream at the dip reads `snr_db`,
    /// counting the quantizer's own LSB²/12 contribution.
    pub fn calibrate_thermal_noise(&mut self, snr_db: f64) {
        let target = self.dip_level() / 10f64.powf(snr_db / 20.0);
        let lsb = self.quantizer.lsb();
        self.detector.noise_std = (target * target - lsb * lsb / 12.0).max(0.0).sqrt();
    }

    /// DAC voltages the tracker may drive: the VCO range intersected with the DAC code range.
    pub fn dac_range(&self) -> [f64; 2] {
        let [v_min, v_max] = self.vco.v_range;
        [v_min.max(0.0), v_max.min(self.quantizer.max_voltage())]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.resonator;
        let finite = [r.f_r0, r.q_factor, r.delta_t, r.baseline, r.sensitivity, r.area];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("resonator fields must be finite".into()));
        }
        if !(r.f_r0 > 0.0 && r.q_factor > 0.0 && r.area > 0.0) {
            return Err(Error::Config("resonator f_r0, q_factor and area must be > 0".into()));
        }
        if !(r.delta_t >= 0.0 && r.delta_t <= r.baseline && r.baseline <= 1.0 && r.baseline > 0.0) {
            return Err(Error::Config(format!(
                "resonator requires 0 <= delta_t <= baseline <= 1 (delta_t={}, baseline={})",
                r.delta_t, r.baseline
            )));
        }
        self.vco.validate()?;
        self.quantizer.validate()?;

        let d = &self.detector;
        if !(d.gain > 0.0 && d.gain.is_finite()) {
            return Err(Error::Config("detector gain must be > 0".into()));
        }
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return Err(Error::Config("detector noise_std must be >= 0".into()));
        }
        if !(d.offset.is_finite() && d.nonlinearity.is_finite()) {
            return Err(Error::Config("detector offset and nonlinearity must be finite".into()));
        }
        let full_scale = self.quantizer.full_scale;
        for i in 0..=100 {
            let v = d.respond(i as f64 / 100.0);
            if !(0.0..=full_scale).contains(&v) {
                return Err(Error::Config(format!(
                    "detector output {v:.4} V leaves the ADC range [0, {full_scale}] V"
                )));
            }
        }

        self.stimulus.validate()?;
        if !(self.emi.amplitude >= 0.0 && self.emi.amplitude.is_finite()) {
            return Err(Error::Config("emi amplitude must be >= 0".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Config("sample_rate must be > 0".into()));
        }
        Ok(())
    }
}
