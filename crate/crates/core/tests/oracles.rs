//! Calibration and loop behaviour against closed-form and dense-grid oracles.

use resotrack_core::calib::{self, CalibConfig, ScanConfig};
use resotrack_core::plant::{self, Plant, PlantConfig, StimulusDomain, StimulusProgram};
use resotrack_core::tracker::{GainSpec, Tracker, TrackerState};

/// Regression K over ±3·A_m divided by the small-signal K∞, continuous line shape.
///
/// Frozen from `k_ratio_closed`; it depends only on the window in A_m units.
const K_RATIO: f64 = 1.230_273_3;

/// One-step residual at 0.5·A_m detuning with k_i = K on the continuous line shape.
const ONE_STEP_RESIDUAL: f64 = 0.169_097_4;

fn analytic() -> PlantConfig {
    PlantConfig::ideal().with_bits(24)
}

fn am_closed(cfg: &PlantConfig) -> f64 {
    let r = &cfg.resonator;
    r.f_r0 / (8.0 * 3f64.sqrt() * r.q_factor) / cfg.vco.slope(1.6)
}

fn calibrate(cfg: &PlantConfig, points: usize, averaging: usize) -> (calib::ScanTrace, calib::CalibrationResult) {
    let mut plant = Plant::new(cfg.clone()).unwrap();
    let scan = ScanConfig::full_range(cfg, points, averaging);
    calib::scan_and_calibrate(&mut plant, &scan, &CalibConfig::default()).unwrap()
}

/// ∫x·T′ dx / ∫x² dx over ±h has the antiderivative arctan x − x/(1+x²) on top.
fn k_ratio_closed() -> f64 {
    let h = 3.0 * (2.0 / 3f64.sqrt()) / 8.0;
    let slope = 3.0 * (h.atan() - h / (1.0 + h * h)) / h.powi(3);
    2.0 / slope
}

/// In units x = 2Q(f − f_r)/f_r with unit depth, T′(x) = 2x/(1+x²)² and T″(0) = 2.
fn k_ratio_dense() -> f64 {
    let half = 3.0 * (2.0 / 3f64.sqrt()) / 8.0;
    let n = 400_001;
    let xs: Vec<f64> = (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x / (1.0 + x * x).powi(2)).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    2.0 / (sxy / sxx)
}

fn one_step_oracle() -> f64 {
    let a = (2.0 / 3f64.sqrt()) / 8.0;
    let d = 0.5 * a;
    let t = |x: f64| -1.0 / (1.0 + x * x);
    // Loop sits at the old dip, the new dip is at +d.
    let e = (t(-d + a) - t(-d - a)) / (2.0 * a);
    let correction = -K_RATIO / 2.0 * e;
    (correction - d).abs() / d
}

#[test]
fn frozen_constants_match_their_oracles() {
    assert!((k_ratio_closed() - K_RATIO).abs() < 1e-7, "{}", k_ratio_closed());
    assert!((k_ratio_dense() - K_RATIO).abs() < 1e-5, "{}", k_ratio_dense());
    assert!((one_step_oracle() - ONE_STEP_RESIDUAL).abs() < 1e-6, "{}", one_step_oracle());
}

#[test]
fn pipeline_k_converges_to_the_regression_oracle() {
    let cfg = analytic();
    let r = &cfg.resonator;
    let s = cfg.vco.slope(1.6);
    let k_inf = r.f_r0.powi(2) / (8.0 * r.q_factor.powi(2) * r.delta_t * cfg.detector.gain * s * s);
    let (_, cal) = calibrate(&cfg, 8192, 1);
    let ratio = cal.k_gain / k_inf;
    assert!((ratio / K_RATIO - 1.0).abs() < 5e-3, "K/K∞ = {ratio}");
    assert!(ratio > 1.0, "regression K must exceed the small-signal value");
}

#[test]
fn one_step_follows_the_closed_form_chain() {
    // With the pipeline's K and A_m the first correction equals K·e computed from the
    // noise-free transmittance at v ± A_m.
    let cfg = analytic();
    let (_, cal) = calibrate(&cfg, 8192, 1);
    let dip0 = Plant::new(cfg.clone()).unwrap().dip_voltage().unwrap();
    let d = 0.5 * cal.a_m;
    let shift = cfg.vco.eval(dip0 + d) - cfg.vco.eval(dip0);
    let shifted = cfg
        .clone()
        .with_stimulus(StimulusProgram::step(StimulusDomain::Frequency, 0.0, 1e9, shift));
    let mut plant = Plant::new(shifted).unwrap();
    let target = plant.dip_voltage().unwrap();
    let f_r = plant.resonance_now();
    let mut tracker = Tracker::from_calibration(&cal, GainSpec::FractionOfK(1.0), plant.config()).unwrap();
    tracker.state = TrackerState::at(dip0);
    let sample = tracker.step_square(&mut plant);

    let volts = |v: f64| {
        let f = plant::vco_frequency(v, &cfg.vco).unwrap();
        cfg.detector.respond(plant::transmittance(f, f_r, &cfg.resonator).unwrap())
    };
    let e = (volts(dip0 + cal.a_m) - volts(dip0 - cal.a_m)) / (2.0 * cal.a_m);
    let expected = dip0 - cal.k_gain * e;
    let lsb = cfg.quantizer.lsb();
    assert!((sample.v_out - expected).abs() < 4.0 * lsb, "{} vs {}", sample.v_out, expected);
    let residual = (sample.v_out - target).abs() / (target - dip0).abs();
    assert!((residual - ONE_STEP_RESIDUAL).abs() < 0.01, "residual {residual}");
}

#[test]
fn dense_derivative_matches_the_analytic_slope() {
    let cfg = analytic();
    let mut plant = Plant::new(cfg.clone()).unwrap();
    let trace = calib::scan(&mut plant, &ScanConfig::full_range(&cfg, 8192, 1)).unwrap();
    let tp = calib::derivative(&trace);
    let f_r = cfg.resonator.f_r0;
    let analytic = |v: f64| {
        let h = 1e-6;
        let t = |v: f64| {
            let f = plant::vco_frequency(v, &cfg.vco).unwrap();
            cfg.detector.respond(plant::transmittance(f, f_r, &cfg.resonator).unwrap())
        };
        (t(v + h) - t(v - h)) / (2.0 * h)
    };
    let peak = tp.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    for &(v, slope) in &tp[10..tp.len() - 10] {
        let want = analytic(v);
        assert!((slope - want).abs() <= 5e-3 * want.abs().max(0.1 * peak), "at {v}: {slope} vs {want}");
    }
}

#[test]
fn a_m_matches_the_closed_form_on_fine_scans() {
    let ideal = PlantConfig::ideal();
    let step_limit = am_closed(&ideal) / 10.0;
    for points in [2048, 4096] {
        let (trace, cal) = calibrate(&ideal, points, 4);
        assert!(trace.step() <= step_limit);
        let rel = cal.a_m / am_closed(&ideal) - 1.0;
        assert!(rel.abs() < 0.02, "{points} points: {rel}");
    }
    let (_, cal) = calibrate(&analytic(), 2048, 1);
    assert!((cal.a_m / am_closed(&analytic()) - 1.0).abs() < 2e-3);
}

#[test]
fn doubling_q_halves_a_m() {
    let mut wide = analytic();
    wide.resonator.q_factor = 50.0;
    let mut narrow = wide.clone();
    narrow.resonator.q_factor = 100.0;
    let (_, a) = calibrate(&wide, 4096, 1);
    let (_, b) = calibrate(&narrow, 4096, 1);
    assert!((a.a_m / b.a_m - 2.0).abs() < 0.02, "{}", a.a_m / b.a_m);
}

#[test]
fn ideal_profile_recovers_q_and_depth() {
    let cfg = PlantConfig::ideal();
    let (_, cal) = calibrate(&cfg, 2048, 4);
    assert!((cal.q_est / 103.2 - 1.0).abs() < 0.02, "Q {}", cal.q_est);
    let depth = 2.4 * 0.44;
    assert!((cal.delta_t_est - depth).abs() <= 2.0 * cfg.quantizer.lsb(), "depth {}", cal.delta_t_est);
}

#[test]
fn detector_gain_scales_depth_not_q() {
    let base = analytic();
    let mut doubled = base.clone();
    doubled.detector.gain = 1.2;
    let mut half = base.clone();
    half.detector.gain = 0.6;
    let (_, a) = calibrate(&doubled, 2048, 1);
    let (_, b) = calibrate(&half, 2048, 1);
    assert!((a.delta_t_est / b.delta_t_est - 2.0).abs() < 1e-3);
    assert!((a.q_est / b.q_est - 1.0).abs() < 1e-3);
    assert!((a.a_m / b.a_m - 1.0).abs() < 1e-3, "A_m depends only on abscissae");
}

#[test]
fn noiseless_hardware_scan_finds_the_resonance() {
    // At 12 bits the broad hardware dip has a multi-code flat bottom.
    let cfg = PlantConfig::hardware().noiseless().with_bits(24);
    let mut plant = Plant::new(cfg.clone()).unwrap();
    let trace = calib::scan(&mut plant, &ScanConfig::full_range(&cfg, 1024, 1)).unwrap();
    let v0 = calib::find_dip(&trace).unwrap();
    let want = cfg.vco.voltage_for(4.92e9).unwrap();
    assert!((v0 - want).abs() <= trace.step(), "{v0} vs {want}");
}

#[test]
fn averaging_reduces_scatter_by_sqrt_n() {
    let mut cfg = PlantConfig::hardware().with_bits(20);
    cfg.vco.jitter_std = 0.0;
    let scan = ScanConfig {
        range: [0.05, 0.35],
        step: 0.3 / 511.0,
        averaging: 1,
    };
    let clean = calib::scan(&mut Plant::new(cfg.clone().noiseless()).unwrap(), &scan)
        .unwrap()
        .v_adc();
    let spread = |averaging: usize| {
        let mut plant = Plant::new(cfg.clone()).unwrap();
        let v = calib::scan(&mut plant, &ScanConfig { averaging, ..scan.clone() }).unwrap().v_adc();
        let r: Vec<f64> = v.iter().zip(&clean).map(|(a, b)| a - b).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
        (mean, var.sqrt())
    };
    let (m1, s1) = spread(1);
    let (m64, s64) = spread(64);
    assert!(m1.abs() < 4.0 * s1 / 512f64.sqrt() && m64.abs() < 4.0 * s64 / 512f64.sqrt());
    let ratio = s1 / s64;
    assert!((6.5..9.5).contains(&ratio), "scatter ratio {ratio}");
}
