//! Time-varying drive of the resonance: permittivity or direct frequency programs.
//!
//! A program is a time-ordered list of non-overlapping segments evaluated against a
//! running level that starts at zero. `hold` sets the level, `step` and `ramp` move it
//! (the new level persists after the segment), `pulse_train` and `sine` modulate around
//! it and leave it unchanged. Gaps between segments hold the current level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Hold,
    Step,
    Ramp,
    PulseTrain,
    Sine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Seconds from the start of the plant clock.
    pub start: f64,
    pub duration: f64,
    /// Permittivity units or Hz, depending on the program domain.
    pub magnitude: f64,
    /// Period of `pulse_train` and `sine` segments, seconds.
    #[serde(default)]
    pub period: f64,
}

impl Segment {
    fn end(&self) -> f64 {
        self.start + self.duration
    }

    fn is_periodic(&self) -> bool {
        matches!(self.kind, SegmentKind::PulseTrain | SegmentKind::Sine)
    }

    /// Value inside the segment given the level at its start.
    fn value(&self, level: f64, t: f64) -> f64 {
        let local = t - self.start;
        match self.kind {
            SegmentKind::Hold => self.magnitude,
            SegmentKind::Step => level + self.magnitude,
            SegmentKind::Ramp => level + self.magnitude * (local / self.duration),
            SegmentKind::PulseTrain => {
                let phase = local.rem_euclid(self.period);
                if phase < 0.5 * self.period {
                    level + self.magnitude
                } else {
                    level
                }
            }
            SegmentKind::Sine => {
                level + self.magnitude * (std::f64::consts::TAU * local / self.period).sin()
            }
        }
    }

    /// Level left behind once the segment is over.
    fn level_after(&self, level: f64) -> f64 {
        match self.kind {
            SegmentKind::Hold => self.magnitude,
            SegmentKind::Step | SegmentKind::Ramp => level + self.magnitude,
            SegmentKind::PulseTrain | SegmentKind::Sine => level,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StimulusDomain {
    /// Magnitudes are relative permittivity, scaled by the resonator sensitivity.
    #[default]
    Permittivity,
    /// Magnitudes are resonance offsets in Hz.
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimulusProgram {
    pub segments: Vec<Segment>,
    pub domain: StimulusDomain,
}

impl StimulusProgram {
    pub fn new(domain: StimulusDomain) -> Self {
        Self {
            segments: Vec::new(),
            domain,
        }
    }

    pub fn push(mut self, kind: SegmentKind, start: f64, duration: f64, magnitude: f64, period: f64) -> Self {
        self.segments.push(Segment {
            kind,
            start,
            duration,
            magnitude,
            period,
        });
        self
    }

    /// A single step of `magnitude` at `start`, persisting for `duration`.
    pub fn step(domain: StimulusDomain, start: f64, duration: f64, magnitude: f64) -> Self {
        Self::new(domain).push(SegmentKind::Step, start, duration, magnitude, 0.0)
    }

    /// A linear ramp reaching `magnitude` after `duration`.
    pub fn ramp(domain: StimulusDomain, start: f64, duration: f64, magnitude: f64) -> Self {
        Self::new(domain).push(SegmentKind::Ramp, start, duration, magnitude, 0.0)
    }

    /// One rectangular pulse per magnitude, each `width` long and followed by `width` of rest.
    pub fn pulses(domain: StimulusDomain, start: f64, width: f64, magnitudes: &[f64]) -> Self {
        magnitudes
            .iter()
            .enumerate()
            .fold(Self::new(domain), |p, (i, &m)| {
                let t = start + i as f64 * 2.0 * width;
                p.push(SegmentKind::PulseTrain, t, 2.0 * width, m, 2.0 * width)
            })
    }

    /// Consecutive steps of `increment`, each held for `dwell`.
    pub fn staircase(domain: StimulusDomain, start: f64, dwell: f64, increment: f64, steps: usize) -> Self {
        (0..steps).fold(Self::new(domain), |p, i| {
            p.push(SegmentKind::Step, start + i as f64 * dwell, dwell, increment, 0.0)
        })
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Program value at `t` seconds.
    pub fn value_at(&self, t: f64) -> f64 {
        let mut level = 0.0;
        for seg in &self.segments {
            if t < seg.start {
                break;
            }
            if t < seg.end() {
                return seg.value(level, t);
            }
            level = seg.level_after(level);
        }
        level
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0.0;
        for (i, seg) in self.segments.iter().enumerate() {
            if !(seg.start.is_finite() && seg.duration.is_finite() && seg.magnitude.is_finite()) {
                return Err(Error::Config(format!("stimulus segment {i} has non-finite fields")));
            }
            if seg.start < 0.0 || seg.duration <= 0.0 {
                return Err(Error::Config(format!(
                    "stimulus segment {i} needs start >= 0 and duration > 0"
                )));
            }
            if seg.start < prev_end {
                return Err(Error::Config(format!(
                    "stimulus segment {i} overlaps or precedes the previous segment"
                )));
            }
            if seg.is_periodic() && !(seg.period > 0.0 && seg.period.is_finite()) {
                return Err(Error::Config(format!("stimulus segment {i} needs a period > 0")));
            }
            prev_end = seg.end();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_program_is_zero() {
        let p = StimulusProgram::default();
        assert_eq!(p.value_at(0.0), 0.0);
        assert_eq!(p.value_at(1e6), 0.0);
    }

    #[test]
    fn step_persists_after_segment() {
        let p = StimulusProgram::step(StimulusDomain::Permittivity, 1.0, 2.0, 0.1);
        assert_eq!(p.value_at(0.999), 0.0);
        assert_eq!(p.value_at(1.0), 0.1);
        assert_eq!(p.value_at(10.0), 0.1);
    }

    #[test]
    fn ramp_interpolates() {
        let p = StimulusProgram::ramp(StimulusDomain::Frequency, 0.0, 4.0, 8.0);
        assert_eq!(p.value_at(1.0), 2.0);
        assert_eq!(p.value_at(5.0), 8.0);
    }

    #[test]
    fn pulses_return_to_level() {
        let p = StimulusProgram::pulses(StimulusDomain::Permittivity, 1.0, 0.5, &[1.0, 2.0, 3.0]);
        p.validate().unwrap();
        assert_eq!(p.value_at(0.5), 0.0);
        assert_eq!(p.value_at(1.2), 1.0);
        assert_eq!(p.value_at(1.7), 0.0);
        assert_eq!(p.value_at(2.2), 2.0);
        assert_eq!(p.value_at(2.7), 0.0);
        assert_eq!(p.value_at(3.2), 3.0);
        assert_eq!(p.value_at(3.9), 0.0);
        assert_eq!(p.value_at(100.0), 0.0);
    }

    #[test]
    fn staircase_accumulates() {
        let p = StimulusProgram::staircase(StimulusDomain::Permittivity, 0.0, 1.0, 0.5, 3);
        assert_eq!(p.value_at(0.5), 0.5);
        assert_eq!(p.value_at(1.5), 1.0);
        assert_eq!(p.value_at(2.5), 1.5);
        assert_eq!(p.value_at(9.0), 1.5);
    }

    #[test]
    fn hold_sets_absolute_level_and_sine_is_centered() {
        let p = StimulusProgram::new(StimulusDomain::Frequency)
            .push(SegmentKind::Hold, 0.0, 1.0, 5.0, 0.0)
            .push(SegmentKind::Sine, 2.0, 1.0, 1.0, 1.0);
        assert_eq!(p.value_at(0.5), 5.0);
        assert_eq!(p.value_at(1.5), 5.0);
        assert!((p.value_at(2.25) - 6.0).abs() < 1e-12);
        assert_eq!(p.value_at(3.5), 5.0);
    }

    #[test]
    fn overlapping_segments_rejected() {
        let p = StimulusProgram::new(StimulusDomain::Permittivity)
            .push(SegmentKind::Step, 0.0, 2.0, 1.0, 0.0)
            .push(SegmentKind::Step, 1.0, 2.0, 1.0, 0.0);
        assert!(p.validate().is_err());
        let p = StimulusProgram::new(StimulusDomain::Permittivity).push(SegmentKind::Sine, 0.0, 2.0, 1.0, 0.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn json_form() {
        let p: StimulusProgram = serde_json::from_str(
            r#"{"domain": "frequency", "segments": [{"kind": "pulse_train", "start": 0, "duration": 2, "magnitude": 1e6, "period": 1}]}"#,
        )
        .unwrap();
        assert_eq!(p.domain, StimulusDomain::Frequency);
        assert_eq!(p.segments[0].kind, SegmentKind::PulseTrain);
    }
}
