//! Named end-to-end pipelines that write plot-ready CSVs and a pass/fail report.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use resotrack_core::calib::{self, ScanConfig};
use resotrack_core::dsp;
use resotrack_core::plant::{EmiConfig, Plant, PlantConfig};
use resotrack_core::tracker::{self, GainSpec, Tracker};
use resotrack_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::scenarios::{self, MEDIAN_WINDOW};
use crate::thresholds::{self as th, Provenance, Threshold};

pub const PARTIAL_MARKER: &str = "PARTIAL";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Scan,
    Calibrate,
    Track,
    SnrVsKi,
    NoisePsd,
    ModulationEquivalence,
    Acetone,
    Emi,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 8] = [
        Self::Scan,
        Self::Calibrate,
        Self::Track,
        Self::SnrVsKi,
        Self::NoisePsd,
        Self::ModulationEquivalence,
        Self::Acetone,
        Self::Emi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Scan => "scan",
            Self::Calibrate => "calibrate",
            Self::Track => "track",
            Self::SnrVsKi => "snr-vs-ki",
            Self::NoisePsd => "noise-psd",
            Self::ModulationEquivalence => "modulation-equivalence",
            Self::Acetone => "acetone",
            Self::Emi => "emi",
        }
    }

    /// Plant used when no configuration file is given.
    pub fn default_plant(self) -> PlantConfig {
        match self {
            Self::SnrVsKi | Self::NoisePsd | Self::Emi => PlantConfig::hardware(),
            Self::ModulationEquivalence => scenarios::analytic_plant(),
            _ => PlantConfig::ideal(),
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::UnknownExperiment(s.to_string()))
    }
}

/// Experiment-specific settings; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Knobs {
    /// Integral gains as fractions of K.
    pub k_i: Vec<f64>,
    /// Gain fraction for single-gain experiments.
    pub gain: f64,
    pub seeds: usize,
    /// Measured tracker points per run.
    pub points: usize,
    /// Tracker points discarded before measuring.
    pub settle: usize,
    /// Scan points over the full DAC range.
    pub scan_points: usize,
    pub scan_averaging: usize,
    /// Detunings for the modulation sweep, in A_m units.
    pub detunings: Vec<f64>,
    /// Permittivity pulse magnitudes.
    pub pulse_magnitudes: Vec<f64>,
    /// Pulse width and staircase dwell, seconds.
    pub pulse_width: f64,
    pub staircase_steps: usize,
    /// Interference amplitude (volts) and frequency (Hz).
    pub emi_amplitude: Option<f64>,
    pub emi_frequency: f64,
}

impl Default for Knobs {
    fn default() -> Self {
        Self {
            k_i: vec![1.0, 0.5, 0.2, 0.1],
            gain: 0.1,
            seeds: 10,
            points: 50_000,
            settle: 2_000,
            scan_points: 2 * calib::DEFAULT_SCAN_POINTS,
            scan_averaging: 4,
            detunings: vec![-0.5, -0.375, -0.25, -0.125, 0.125, 0.25, 0.375, 0.5],
            pulse_magnitudes: vec![0.01, 0.02, 0.03],
            pulse_width: 1.0,
            staircase_steps: 4,
            emi_amplitude: None,
            emi_frequency: 50.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    /// Plant configuration; `None` picks the experiment's default plant.
    pub plant: Option<PlantConfig>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub knobs: Knobs,
}

impl ExperimentSpec {
    pub fn new(name: ExperimentName, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            name,
            plant: None,
            seed: 0,
            out_dir: out_dir.into(),
            knobs: Knobs::default(),
        }
    }

    pub fn plant_config(&self) -> PlantConfig {
        self.plant
            .clone()
            .unwrap_or_else(|| self.name.default_plant())
            .with_seed(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant_config().validate()?;
        let k = &self.knobs;
        if k.k_i.is_empty() || k.k_i.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("k_i fractions must be positive".into()));
        }
        if !(k.gain > 0.0) || k.seeds == 0 || k.points < 256 || k.scan_points < 2 || k.scan_averaging == 0 {
            return Err(Error::Config("experiment knobs out of range".into()));
        }
        if !(k.pulse_width > 0.0) || k.staircase_steps == 0 {
            return Err(Error::Config("pulse width and staircase steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
    pub provenance: Provenance,
    pub basis: String,
}

impl Check {
    fn new(name: &str, value: f64, pass: bool, threshold: String, t: &Threshold) -> Self {
        Self {
            name: name.to_string(),
            value,
            threshold,
            pass,
            provenance: t.provenance,
            basis: t.basis.to_string(),
        }
    }

    fn at_most(name: &str, value: f64, t: &Threshold) -> Self {
        Self::new(name, value, value <= t.value, format!("<= {}", t.value), t)
    }

    fn at_least(name: &str, value: f64, t: &Threshold) -> Self {
        Self::new(name, value, value >= t.value, format!(">= {}", t.value), t)
    }

    fn below(name: &str, value: f64, t: &Threshold) -> Self {
        Self::new(name, value, value.abs() < t.value, format!("|x| < {}", t.value), t)
    }

    fn holds(name: &str, ok: bool, provenance: Provenance, basis: &str) -> Self {
        Self {
            name: name.to_string(),
            value: if ok { 1.0 } else { 0.0 },
            threshold: "true".into(),
            pass: ok,
            provenance,
            basis: basis.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub name: ExperimentName,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn write_rows(dir: &Path, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(dir, name)?);
    out.write_record(header)?;
    for row in rows {
        out.write_record(row)?;
    }
    out.flush()?;
    Ok(())
}

fn write_report(dir: &Path, report: Option<&ExperimentReport>, error: Option<&Error>) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(dir, REPORT_FILE)?);
    out.write_record(["check", "value", "threshold", "pass", "provenance", "basis"])?;
    if let Some(r) = report {
        for c in &r.checks {
            out.write_record([
                c.name.clone(),
                c.value.to_string(),
                c.threshold.clone(),
                c.pass.to_string(),
                c.provenance.as_str().to_string(),
                c.basis.clone(),
            ])?;
        }
    }
    if let Some(e) = error {
        out.write_record(["error", "", "", "false", "", &e.to_string()])?;
    }
    out.write_record(["thresholds_version", th::VERSION, "", "", "", ""])?;
    out.flush()?;
    Ok(())
}

/// Runs the named pipeline, writing its CSVs and `report.csv` into `spec.out_dir`.
///
/// On failure a `PARTIAL` marker holding the error is left next to whatever was written.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;
    let marker = spec.out_dir.join(PARTIAL_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    match run_inner(spec) {
        Ok(report) => {
            write_report(&spec.out_dir, Some(&report), None)?;
            Ok(report)
        }
        Err(e) => {
            fs::write(&marker, format!("{e}\n"))?;
            write_report(&spec.out_dir, None, Some(&e))?;
            Err(e)
        }
    }
}

fn run_inner(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let plant = spec.plant_config();
    let dir = spec.out_dir.as_path();
    let k = &spec.knobs;
    let checks = match spec.name {
        ExperimentName::Scan => scan(&plant, k, dir)?,
        ExperimentName::Calibrate => calibrate(&plant, k, dir)?,
        ExperimentName::Track => track(&plant, k, dir)?,
        ExperimentName::SnrVsKi => snr_vs_ki(&plant, k, dir, spec.seed)?,
        ExperimentName::NoisePsd => noise_psd(&plant, k, dir)?,
        ExperimentName::ModulationEquivalence => modulation(&plant, k, dir)?,
        ExperimentName::Acetone => acetone(&plant, k, dir)?,
        ExperimentName::Emi => emi(&plant, k, dir)?,
    };
    Ok(ExperimentReport {
        name: spec.name,
        checks,
    })
}

fn scan_config(plant: &PlantConfig, k: &Knobs) -> ScanConfig {
    ScanConfig::full_range(plant, k.scan_points, k.scan_averaging)
}

fn scan(plant_cfg: &PlantConfig, k: &Knobs, dir: &Path) -> Result<Vec<Check>> {
    let mut plant = Plant::new(plant_cfg.clone())?;
    let truth = scenarios::true_dip(&plant)?;
    let trace = calib::scan(&mut plant, &scan_config(plant_cfg, k))?;
    trace.write_csv(create(dir, "scan.csv")?)?;
    let v0 = calib::find_dip(&trace)?;
    Ok(vec![Check::at_most(
        "dip_offset_steps",
        (v0 - truth).abs() / trace.step(),
        &Threshold {
            value: 1.0,
            ..th::V0_MAX_ERROR_LSB
        },
    )])
}

fn calibrate(plant_cfg: &PlantConfig, k: &Knobs, dir: &Path) -> Result<Vec<Check>> {
    let mut plant = Plant::new(plant_cfg.clone())?;
    let truth = scenarios::true_dip(&plant)?;
    let trace = calib::scan(&mut plant, &scan_config(plant_cfg, k))?;
    trace.write_csv(create(dir, "scan.csv")?)?;
    let cal = calib::calibrate(&trace, &plant_cfg.vco, &Default::default())?;
    cal.write_csv(create(dir, "calibration.csv")?)?;
    let r = &plant_cfg.resonator;
    let lsb = plant_cfg.quantizer.lsb();
    let slope = plant_cfg.vco.slope(truth);
    let am_closed = r.f_r0 / (8.0 * 3f64.sqrt() * r.q_factor) / slope;
    let depth_true = plant_cfg.detector.gain * r.delta_t;
    Ok(vec![
        Check::at_most("v0_error_lsb", (cal.v0 - truth).abs() / lsb, &th::V0_MAX_ERROR_LSB),
        Check::at_most("a_m_rel_error", (cal.a_m / am_closed - 1.0).abs(), &th::AM_REL_TOL),
        Check::at_most("q_rel_error", (cal.q_est / r.q_factor - 1.0).abs(), &th::Q_REL_TOL),
        Check::at_most("depth_error_lsb", (cal.delta_t_est - depth_true).abs() / lsb, &th::DEPTH_TOL_LSB),
    ])
}

fn track(plant_cfg: &PlantConfig, k: &Knobs, dir: &Path) -> Result<Vec<Check>> {
    let mut plant = Plant::new(plant_cfg.clone())?;
    let (_, cal) = calib::scan_and_calibrate(&mut plant, &scan_config(plant_cfg, k), &Default::default())?;
    cal.write_csv(create(dir, "calibration.csv")?)?;
    let mut tracker = Tracker::from_calibration(&cal, GainSpec::FractionOfK(k.gain), plant.config())?;
    let samples = tracker.run_collect(k.settle + k.points, &mut plant);
    tracker::write_run_csv(&samples, create(dir, "track.csv")?)?;
    let v = scenarios::v_out(&samples[k.settle..]);
    let window = if v.len() >= MEDIAN_WINDOW { MEDIAN_WINDOW } else { (v.len() - 1) | 1 };
    let filtered = dsp::median_filter(&v, window)?;
    write_rows(
        dir,
        "filtered.csv",
        &["iteration", "v_out", "filtered"],
        samples[k.settle..]
            .iter()
            .zip(&filtered)
            .map(|(s, f)| vec![s.iteration.to_string(), s.v_out.to_string(), f.to_string()]),
    )?;
    let dip = scenarios::true_dip(&plant)?;
    let lsb = plant_cfg.quantizer.lsb();
    let worst = v.iter().map(|x| (x - dip).abs()).fold(0.0, f64::max) / lsb;
    let mut checks = vec![Check::holds(
        "always_locked",
        samples.iter().all(|s| s.locked),
        Provenance::DerivedOracle,
        "static or slow plant never loses lock",
    )];
    if plant_cfg.detector.noise_std == 0.0 && plant_cfg.vco.jitter_std == 0.0 && plant_cfg.stimulus.is_empty() {
        checks.push(Check::at_most("static_lock_error_lsb", worst, &th::RELOCK_LSB));
    }
    Ok(checks)
}

fn snr_vs_ki(plant_cfg: &PlantConfig, k: &Knobs, dir: &Path, first_seed: u64) -> Result<Vec<Check>> {
    let seeds: Vec<u64> = (first_seed..first_seed + k.seeds as u64).collect();
    let rows = scenarios::snr_vs_ki(plant_cfg, &k.k_i, &seeds, k.settle, k.points)?;
    write_rows(
        dir,
        "snr.csv",
        &["seed", "k_i_fraction", "snr_db", "filtered_snr_db"],
        rows.iter().map(|r| {
            vec![
                r.seed.to_string(),
                r.fraction.to_string(),
                r.snr_db.to_string(),
                r.filtered_snr_db.to_string(),
            ]
        }),
    )?;
    let medians: Vec<f64> = k.k_i.iter().map(|&f| scenarios::median_for(&rows, f, |r| r.snr_db)).collect();
    write_rows(
        dir,
        "snr_summary.csv",
        &["k_i_fraction", "median_snr_db", "median_filtered_snr_db"],
        k.k_i.iter().zip(&medians).map(|(&f, m)| {
            vec![
                f.to_string(),
                m.to_string(),
                scenarios::median_for(&rows, f, |r| r.filtered_snr_db).to_string(),
            ]
        }),
    )?;
    let monotone = medians.windows(2).all(|w| w[1] > w[0]);
    let spread = medians.last().unwrap() - medians.first().unwrap();
    let smallest = *k.k_i.last().unwrap();
    let gain = scenarios::median_for(&rows, smallest, |r| r.filtered_snr_db - r.snr_db);
    Ok(vec![
        Check::holds(
            "median_snr_strictly_increasing",
            monotone,
            Provenance::ReferenceMeasurement,
            th::SNR_SPREAD_DB.basis,
        ),
        Check::at_least("snr_spread_db", spread, &th::SNR_SPREAD_DB),
        Check::at_least("median_filter_gain_db", gain, &th::MEDIAN_GAIN_DB),
    ])
}

fn noise_psd(plant_cfg: &PlantConfig, k: &Knobs, dir: &Path) -> Result<Vec<Check>> {
    let rate = plant_cfg.sample_rate / 2.0;
    // The moment test needs a minimum sample count regardless of the shared default.
    let points = k.points.max(th::GAUSS_MIN_SAMPLES.value as usize);
    let nc = scenarios::noise_character(plant_cfg, k.gain, k.settle, points, rate)?;
    dsp::write_psd_csv(&nc.psd, create(dir, "psd.csv")?)?;
    dsp::write_stats_csv(&nc.report.stats, create(dir, "stats.csv")?)?;
    let h = &nc.report.histogram;
    write_rows(
        dir,
        "histogram.csv",
        &["center", "count", "fitted"],
        h.centers()
            .iter()
            .zip(&h.counts)
            .zip(h.fitted_counts())
            .map(|((c, n), f)| vec![c.to_string(), n.to_string(), f.to_string()]),
    )?;
    let s = &nc.report.stats;
    Ok(vec![
        Check::at_least("samples", s.n as f64, &th::GAUSS_MIN_SAMPLES),
        Check::below("skewness", s.skewness, &th::GAUSS_SKEW),
        Check::below("excess_kurtosis", s.excess_kurtosis, &th::GAUSS_KURTOSIS),
        Check::at_least("psd_decade_contrast_db", nc.decade_contrast_db, &th::PSD_DECADE_DB),
    ])
}

/// Relative spread `(max − min) / |mean|` of the square/sine error ratio.
pub fn ratio_spread(points: &[scenarios::ModulationPoint]) -> f64 {
    let r: Vec<f64> = points.iter().map(|p| p.ratio()).collect();
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = r.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    (max - min) / mean.abs()
}

fn modulation(plant_cfg: &PlantConfig, k: &Knobs, dir: &Path) -> Result<Vec<Check>> {
    let sweep = scenarios::modulation_sweep(plant_cfg, &k.detunings)?;
    write_rows(
        dir,
        "modulation.csv",
        &["detuning", "error_square", "error_sine", "ratio"],
        sweep.iter().map(|p| {
            vec![
                p.detuning.to_string(),
                p.square.to_string(),
                p.sine.to_string(),
                p.ratio().to_string(),
            ]
        }),
    )?;
    Ok(vec![Check::at_most("ratio_spread", ratio_spread(&sweep), &th::MODULATION_RATIO_TOL)])
}

fn acetone(plant_cfg: &PlantConfig, k: &Knobs, dir: &Path) -> Result<Vec<Check>> {
    let (pulses, samples) = scenarios::acetone_pulses(plant_cfg, &k.pulse_magnitudes, k.pulse_width, k.gain)?;
    tracker::write_run_csv(&samples, create(dir, "pulses_track.csv")?)?;
    write_rows(
        dir,
        "pulses.csv",
        &["magnitude", "excursion", "recovery"],
        pulses
            .iter()
            .map(|p| vec![p.magnitude.to_string(), p.excursion.to_string(), p.recovery.to_string()]),
    )?;
    let increment = k.pulse_magnitudes.first().copied().unwrap_or(0.01);
    let (stairs, samples) = scenarios::acetone_staircase(plant_cfg, increment, k.staircase_steps, k.pulse_width, k.gain)?;
    tracker::write_run_csv(&samples, create(dir, "staircase_track.csv")?)?;
    write_rows(
        dir,
        "staircase.csv",
        &["step", "level"],
        stairs.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]),
    )?;
    let lsb = plant_cfg.quantizer.lsb();
    let magnitudes_sorted = k.pulse_magnitudes.windows(2).all(|w| w[1] > w[0]);
    let excursions_monotone =
        magnitudes_sorted && pulses.windows(2).all(|w| w[1].excursion.abs() > w[0].excursion.abs());
    let worst_recovery = pulses.iter().map(|p| p.recovery.abs()).fold(0.0, f64::max) / lsb;
    let dir_sign = stairs.first().map_or(0.0, |s| s.signum());
    let stairs_monotone = dir_sign != 0.0 && stairs.windows(2).all(|w| (w[1] - w[0]) * dir_sign > 0.0);
    let mut checks = vec![
        Check::holds(
            "pulse_excursions_monotone",
            excursions_monotone,
            Provenance::ReferenceMeasurement,
            "resonance falls further for stronger vapor pulses",
        ),
        Check::holds(
            "staircase_monotone",
            stairs_monotone,
            Provenance::ReferenceMeasurement,
            "increasing concentration steps give a staircase",
        ),
    ];
    if plant_cfg.detector.noise_std == 0.0 && plant_cfg.vco.jitter_std == 0.0 {
        checks.push(Check::at_most("baseline_recovery_lsb", worst_recovery, &th::RECOVERY_LSB));
    }
    Ok(checks)
}

fn emi(plant_cfg: &PlantConfig, k: &Knobs, dir: &Path) -> Result<Vec<Check>> {
    let amplitude = k
        .emi_amplitude
        .unwrap_or_else(|| scenarios::emi_amplitude_for_std(plant_cfg, 0.0067));
    let cfg = EmiConfig {
        enabled: true,
        amplitude,
        frequency: k.emi_frequency,
        phase: 0.0,
    };
    let (off, on) = scenarios::emi_pair(plant_cfg, &cfg, k.gain, k.settle, k.points)?;
    write_rows(
        dir,
        "emi.csv",
        &["interference", "amplitude", "snr_db"],
        [
            vec!["off".into(), "0".into(), off.to_string()],
            vec!["on".into(), amplitude.to_string(), on.to_string()],
        ],
    )?;
    let t = Threshold {
        name: "emi_snr_drop_db",
        value: 0.0,
        provenance: Provenance::ReferenceMeasurement,
        basis: "interference degrades the tracking SNR",
    };
    Ok(vec![Check::new(
        "emi_snr_drop_db",
        off - on,
        off - on > 0.0,
        "> 0".into(),
        &t,
    )])
}
