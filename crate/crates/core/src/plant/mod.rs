//! Simulated sensor front end: VCO → resonator → detector → ADC.
//!
//! The plant is untimed. One call to [`Plant::sample_adc`] is one ADC conversion and
//! advances the stimulus clock by `1 / sample_rate` seconds. Two Gaussian draws are taken
//! per conversion (VCO jitter, then detector noise) whether or not either source is
//! enabled, so toggling one source never shifts the other's random stream.

mod config;
mod stimulus;

pub use config::{
    DetectorConfig, EmiConfig, PlantConfig, PlantProfile, QuantizerConfig, ResonatorConfig,
    VcoConfig, DEFAULT_SAMPLE_RATE, HARDWARE_ADC_SNR_DB, HARDWARE_JITTER_STD, RESONATOR_DIAMETER,
};
pub use stimulus::{Segment, SegmentKind, StimulusDomain, StimulusProgram};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Lorentzian power-transmittance dip: `baseline − δT / (1 + x²)`, `x = 2Q(f − f_r)/f_r`.
pub fn transmittance(f: f64, f_r: f64, cfg: &ResonatorConfig) -> Result<f64> {
    if !(f > 0.0 && f_r > 0.0) {
        return Err(Error::Domain(format!(
            "transmittance needs positive frequencies (f={f}, f_r={f_r})"
        )));
    }
    let x = 2.0 * cfg.q_factor * (f - f_r) / f_r;
    Ok(cfg.baseline - cfg.delta_t / (1.0 + x * x))
}

/// Noise-free VCO output frequency for a tuning voltage.
pub fn vco_frequency(v_dac: f64, cfg: &VcoConfig) -> Result<f64> {
    let [v_min, v_max] = cfg.v_range;
    if !(v_dac >= v_min && v_dac <= v_max) {
        return Err(Error::Range(format!(
            "DAC voltage {v_dac} V outside the VCO range [{v_min}, {v_max}] V"
        )));
    }
    Ok(cfg.eval(v_dac))
}

/// Resonance frequency after `index` samples of the stimulus program.
pub fn resonance_at(index: u64, sample_rate: f64, cfg: &ResonatorConfig, program: &StimulusProgram) -> f64 {
    if program.is_empty() {
        return cfg.f_r0;
    }
    let value = program.value_at(index as f64 / sample_rate);
    match program.domain {
        StimulusDomain::Permittivity => cfg.f_r0 + cfg.sensitivity * value,
        StimulusDomain::Frequency => cfg.f_r0 + value,
    }
}

/// Mutable part of a plant: clock, current resonance and the random stream.
#[derive(Debug, Clone)]
pub struct PlantState {
    pub time_index: u64,
    pub f_r_current: f64,
    rng: ChaCha8Rng,
}

impl PlantState {
    fn new(seed: u64, f_r: f64) -> Self {
        Self {
            time_index: 0,
            f_r_current: f_r,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// One ADC conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcSample {
    pub volts: f64,
    /// The pre-quantization voltage fell outside the ADC range and was clamped.
    pub saturated: bool,
}

#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    state: PlantState,
}

impl Plant {
    pub fn new(cfg: PlantConfig) -> Result<Self> {
        cfg.validate()?;
        let state = PlantState::new(cfg.seed, cfg.resonator.f_r0);
        let mut plant = Self { cfg, state };
        plant.state.f_r_current = plant.resonance_now();
        Ok(plant)
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn time_index(&self) -> u64 {
        self.state.time_index
    }

    /// Seconds elapsed on the stimulus clock.
    pub fn time(&self) -> f64 {
        self.state.time_index as f64 / self.cfg.sample_rate
    }

    pub fn lsb(&self) -> f64 {
        self.cfg.quantizer.lsb()
    }

    pub fn dac_range(&self) -> [f64; 2] {
        self.cfg.dac_range()
    }

    /// Resonance the next conversion will see.
    pub fn resonance_now(&self) -> f64 {
        resonance_at(
            self.state.time_index,
            self.cfg.sample_rate,
            &self.cfg.resonator,
            &self.cfg.stimulus,
        )
    }

    /// Ground-truth DAC voltage of the dip at the next conversion (unquantized).
    pub fn dip_voltage(&self) -> Option<f64> {
        self.cfg.vco.voltage_for(self.resonance_now())
    }

    /// DAC code voltage the converter actually outputs for `v`.
    pub fn quantize_dac(&self, v: f64) -> f64 {
        self.cfg.quantizer.quantize(v).0
    }

    pub fn set_stimulus(&mut self, program: StimulusProgram) -> Result<()> {
        program.validate()?;
        self.cfg.stimulus = program;
        Ok(())
    }

    pub fn set_emi(&mut self, emi: EmiConfig) -> Result<()> {
        if !(emi.amplitude >= 0.0 && emi.amplitude.is_finite()) {
            return Err(Error::Config("emi amplitude must be >= 0".into()));
        }
        self.cfg.emi = emi;
        Ok(())
    }

    fn draw(&mut self) -> (f64, f64) {
        let jitter: f64 = self.state.rng.sample(StandardNormal);
        let thermal: f64 = self.state.rng.sample(StandardNormal);
        (jitter, thermal)
    }

    /// Drives the DAC at `v_dac`, performs one ADC conversion and advances the clock.
    pub fn sample_adc(&mut self, v_dac: f64) -> Result<AdcSample> {
        if !v_dac.is_finite() {
            return Err(Error::Range(format!("DAC voltage {v_dac} is not finite")));
        }
        let [v_min, v_max] = self.cfg.vco.v_range;
        if v_dac < v_min || v_dac > v_max {
            return Err(Error::Range(format!(
                "DAC voltage {v_dac} V outside the VCO range [{v_min}, {v_max}] V"
            )));
        }
        let f_r = self.resonance_now();
        let (jitter, thermal) = self.draw();

        let v_q = self.quantize_dac(v_dac);
        let f = self.cfg.vco.eval(v_q) + self.cfg.vco.jitter_std * jitter;
        let t = transmittance(f, f_r, &self.cfg.resonator)?;
        let mut v = self.cfg.detector.respond(t) + self.cfg.detector.noise_std * thermal;
        let emi = &self.cfg.emi;
        if emi.enabled {
            v += emi.amplitude * (std::f64::consts::TAU * emi.frequency * self.time() + emi.phase).sin();
        }
        let (volts, saturated) = self.cfg.quantizer.quantize(v);

        self.state.f_r_current = f_r;
        self.state.time_index += 1;
        Ok(AdcSample { volts, saturated })
    }

    /// Mean of `count` consecutive conversions at one DAC voltage.
    pub fn sample_averaged(&mut self, v_dac: f64, count: usize) -> Result<AdcSample> {
        let mut sum = 0.0;
        let mut saturated = false;
        for _ in 0..count.max(1) {
            let s = self.sample_adc(v_dac)?;
            sum += s.volts;
            saturated |= s.saturated;
        }
        Ok(AdcSample {
            volts: sum / count.max(1) as f64,
            saturated,
        })
    }

    /// Advances the clock (and random stream) by `n` conversions without sampling.
    pub fn skip(&mut self, n: u64) {
        for _ in 0..n {
            self.draw();
            self.state.time_index += 1;
        }
        self.state.f_r_current = self.resonance_now();
    }
}
