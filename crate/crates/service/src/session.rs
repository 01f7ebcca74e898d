//! One plant + tracker session driven by commands and advanced point by point.
//!
//! The session is synchronous and deterministic: the server decides when and how many
//! points to produce, the session decides what they are.

use std::collections::VecDeque;

use resotrack_core::calib::{self, CalibConfig, CalibrationResult, ScanConfig, ScanTrace};
use resotrack_core::dsp::StreamingMedian;
use resotrack_core::plant::{Plant, PlantConfig};
use resotrack_core::tracker::{GainSpec, Tracker, TrackerConfig, TrackerSample};
use resotrack_core::{Error, Result};
use serde_json::json;

use crate::protocol::{
    frame_encode, CalibrationSummary, Command, Event, Mode, Reply, Request, Samples, ScanPoint, TrackPoint,
    BLOCK_SIZE,
};

/// Median window of the displayed stream in normal mode.
pub const DISPLAY_WINDOW: usize = 301;
/// Median window of the displayed stream in smooth mode.
pub const SMOOTH_WINDOW: usize = 3001;
/// Tracker points retained for persistence; older points are dropped.
pub const MAX_RUN_POINTS: usize = 4_000_000;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub plant: PlantConfig,
    pub scan: ScanConfig,
    pub calib: CalibConfig,
}

impl SessionConfig {
    pub fn new(plant: PlantConfig) -> Self {
        let scan = ScanConfig::full_range(&plant, calib::DEFAULT_SCAN_POINTS, 4);
        Self {
            plant,
            scan,
            calib: CalibConfig::default(),
        }
    }
}

/// Everything needed to persist a tracking run.
#[derive(Debug, Clone)]
pub struct RunSnapshot {
    pub id: u64,
    pub seed: u64,
    pub plant: PlantConfig,
    pub tracker: TrackerConfig,
    pub calibration: CalibrationResult,
    pub samples: Vec<TrackerSample>,
    pub dropped: u64,
}

#[derive(Debug)]
struct RunRecord {
    id: u64,
    samples: VecDeque<TrackerSample>,
    dropped: u64,
}

impl RunRecord {
    fn push(&mut self, s: TrackerSample) {
        if self.samples.len() == MAX_RUN_POINTS {
            self.samples.pop_front();
            self.dropped += 1;
        }
        self.samples.push_back(s);
    }
}

#[derive(Debug)]
struct Sweep {
    voltages: Vec<f64>,
    readings: Vec<f64>,
    step: f64,
}

/// What a command produced.
#[derive(Debug)]
pub struct Handled {
    /// `None` when the reply is produced later, by the persistence writer.
    pub reply: Option<Reply>,
    /// Telemetry lines, in order.
    pub lines: Vec<String>,
    pub persist: Option<RunSnapshot>,
    /// The output schedule starts over (a new mode or a blocking recalibration).
    pub restart_clock: bool,
}

impl Handled {
    fn reply(reply: Reply) -> Self {
        Self {
            reply: Some(reply),
            lines: Vec::new(),
            persist: None,
            restart_clock: false,
        }
    }
}

pub struct Session {
    cfg: SessionConfig,
    plant: Plant,
    mode: Mode,
    tracker: Option<Tracker>,
    calibration: Option<CalibrationResult>,
    gain: GainSpec,
    k_p: f64,
    k_d: f64,
    smooth: bool,
    display: StreamingMedian,
    display_smooth: StreamingMedian,
    sweep: Option<Sweep>,
    seq: u64,
    block_fill: usize,
    run: Option<RunRecord>,
    runs_started: u64,
    was_locked: bool,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Result<Self> {
        let plant = Plant::new(cfg.plant.clone())?;
        Ok(Self {
            cfg,
            plant,
            mode: Mode::Idle,
            tracker: None,
            calibration: None,
            gain: GainSpec::FractionOfK(1.0),
            k_p: 0.0,
            k_d: 0.0,
            smooth: false,
            display: StreamingMedian::new(DISPLAY_WINDOW)?,
            display_smooth: StreamingMedian::new(SMOOTH_WINDOW)?,
            sweep: None,
            seq: 0,
            block_fill: 0,
            run: None,
            runs_started: 0,
            was_locked: false,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn smooth(&self) -> bool {
        self.smooth
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn tracker(&self) -> Option<&Tracker> {
        self.tracker.as_ref()
    }

    pub fn calibration(&self) -> Option<&CalibrationResult> {
        self.calibration.as_ref()
    }

    pub fn next_seq(&self) -> u64 {
        self.seq
    }

    pub fn handle(&mut self, req: Request) -> Handled {
        let id = req.id;
        match req.command {
            Command::Stop => {
                let mut lines = Vec::new();
                self.set_mode(Mode::Idle, &mut lines);
                Handled {
                    lines,
                    ..Handled::reply(Reply::ok(id, json!({ "mode": Mode::Idle })))
                }
            }
            Command::StartScan => {
                let mut lines = Vec::new();
                self.set_mode(Mode::Scan, &mut lines);
                self.sweep = None;
                Handled {
                    lines,
                    restart_clock: true,
                    ..Handled::reply(Reply::ok(id, json!({ "mode": Mode::Scan })))
                }
            }
            Command::StartTrack => self.start_track(id),
            Command::Relock => self.relock(id),
            Command::SetPid {
                k_i,
                k_i_fraction,
                k_p,
                k_d,
            } => Handled::reply(self.set_pid(id, k_i, k_i_fraction, k_p, k_d)),
            Command::SetSmooth { on } => {
                self.smooth = on;
                Handled::reply(Reply::ok(id, json!({ "smooth": on })))
            }
            Command::SetStimulus { mut program } => {
                let now = self.plant.time();
                for seg in &mut program.segments {
                    seg.start += now;
                }
                Handled::reply(match self.plant.set_stimulus(program) {
                    Ok(()) => Reply::ok(id, json!({ "applied_at": now })),
                    Err(e) => Reply::err(id, e.to_string()),
                })
            }
            Command::SetEmi { emi } => Handled::reply(match self.plant.set_emi(emi) {
                Ok(()) => Reply::ok(id, json!({ "emi": self.plant.config().emi })),
                Err(e) => Reply::err(id, e.to_string()),
            }),
            Command::Snapshot => match self.snapshot() {
                Some(snap) => Handled {
                    reply: None,
                    lines: Vec::new(),
                    persist: Some(snap),
                    restart_clock: false,
                },
                None => Handled::reply(Reply::err(id, "no run to persist")),
            },
        }
    }

    fn set_mode(&mut self, mode: Mode, lines: &mut Vec<String>) {
        if self.mode != mode {
            self.mode = mode;
            lines.push(Event::Mode { mode }.encode());
        }
        self.block_fill = 0;
    }

    fn current_tracker_config(&self, cal: &CalibrationResult) -> Result<TrackerConfig> {
        let mut cfg = TrackerConfig::from_calibration(cal, self.gain, self.plant.config())?;
        cfg.k_p = self.k_p;
        cfg.k_d = self.k_d;
        Ok(cfg)
    }

    fn begin_run(&mut self) {
        self.runs_started += 1;
        self.run = Some(RunRecord {
            id: self.runs_started,
            samples: VecDeque::new(),
            dropped: 0,
        });
        self.display.reset();
        self.display_smooth.reset();
    }

    fn calibration_line(cal: &CalibrationResult) -> String {
        Event::Calibration {
            calibration: CalibrationSummary::from(cal),
        }
        .encode()
    }

    fn start_track(&mut self, id: Option<u64>) -> Handled {
        let mut lines = Vec::new();
        let (cfg_scan, cfg_cal) = (self.cfg.scan.clone(), self.cfg.calib.clone());
        let result = calib::scan_and_calibrate(&mut self.plant, &cfg_scan, &cfg_cal)
            .and_then(|(_, cal)| Ok((self.current_tracker_config(&cal)?, cal)));
        match result {
            Ok((tcfg, cal)) => {
                let tracker = Tracker::new(tcfg, resotrack_core::tracker::TrackerState::at(cal.v0))
                    .expect("validated tracker config");
                self.tracker = Some(tracker);
                lines.push(Self::calibration_line(&cal));
                let summary = CalibrationSummary::from(&cal);
                self.calibration = Some(cal);
                self.was_locked = true;
                self.begin_run();
                self.set_mode(Mode::Track, &mut lines);
                Handled {
                    lines,
                    restart_clock: true,
                    ..Handled::reply(Reply::ok(id, json!({ "calibration": summary })))
                }
            }
            Err(e) => {
                self.set_mode(Mode::Idle, &mut lines);
                Handled {
                    lines,
                    restart_clock: true,
                    ..Handled::reply(Reply::err(id, e.to_string()))
                }
            }
        }
    }

    fn relock(&mut self, id: Option<u64>) -> Handled {
        let Some(tracker) = self.tracker.as_mut() else {
            return self.start_track(id);
        };
        let mut lines = Vec::new();
        let (scan_cfg, cal_cfg, gain) = (self.cfg.scan.clone(), self.cfg.calib.clone(), self.gain);
        let result = tracker.relock(&mut self.plant, &scan_cfg, &cal_cfg, gain);
        self.set_mode(Mode::Track, &mut lines);
        let reply = match result {
            Ok(cal) => {
                lines.push(Self::calibration_line(&cal));
                let summary = CalibrationSummary::from(&cal);
                self.calibration = Some(cal);
                self.was_locked = true;
                if self.run.is_none() {
                    self.begin_run();
                }
                Reply::ok(id, json!({ "calibration": summary }))
            }
            Err(e) => Reply::err(id, e.to_string()),
        };
        Handled {
            lines,
            restart_clock: true,
            ..Handled::reply(reply)
        }
    }

    fn set_pid(&mut self, id: Option<u64>, k_i: Option<f64>, fraction: Option<f64>, k_p: f64, k_d: f64) -> Reply {
        let gain = match (k_i, fraction) {
            (Some(v), None) => GainSpec::Absolute(v),
            (None, Some(f)) => GainSpec::FractionOfK(f),
            _ => return Reply::err(id, "set_pid needs exactly one of k_i or k_i_fraction"),
        };
        let value = match gain {
            GainSpec::Absolute(v) | GainSpec::FractionOfK(v) => v,
        };
        if !(value > 0.0 && value.is_finite()) || !k_p.is_finite() || !k_d.is_finite() {
            return Reply::err(id, "k_i must be > 0 and all gains finite");
        }
        self.gain = gain;
        self.k_p = k_p;
        self.k_d = k_d;
        let resolved = self.calibration.as_ref().map(|c| gain.resolve(c.k_gain));
        if let (Some(t), Some(k_i)) = (self.tracker.as_mut(), resolved) {
            t.config.k_i = k_i;
            t.config.k_p = k_p;
            t.config.k_d = k_d;
        }
        Reply::ok(id, json!({ "k_i": resolved, "k_p": k_p, "k_d": k_d }))
    }

    /// Copy of the current run for persistence.
    pub fn snapshot(&self) -> Option<RunSnapshot> {
        let run = self.run.as_ref()?;
        let tracker = self.tracker.as_ref()?;
        Some(RunSnapshot {
            id: run.id,
            seed: self.cfg.plant.seed,
            plant: self.plant.config().clone(),
            tracker: tracker.config.clone(),
            calibration: self.calibration.clone()?,
            samples: run.samples.iter().copied().collect(),
            dropped: run.dropped,
        })
    }

    /// Produces `n` points in the current mode and returns the telemetry lines.
    pub fn advance(&mut self, n: usize) -> Vec<String> {
        let mut lines = Vec::new();
        match self.mode {
            Mode::Idle => {}
            Mode::Scan => self.advance_scan(n, &mut lines),
            Mode::Track => self.advance_track(n, &mut lines),
        }
        lines
    }

    fn push_frames(&mut self, samples: Samples, lines: &mut Vec<String>) {
        let mode = self.mode;
        let mut rest = samples;
        while !rest.is_empty() {
            let room = BLOCK_SIZE - self.block_fill;
            let (head, tail) = split(rest, room);
            let marker = self.block_fill == 0;
            self.block_fill = (self.block_fill + head.len()) % BLOCK_SIZE;
            let bytes = frame_encode(head, mode, self.seq, marker).expect("frames stay within one block");
            self.seq += 1;
            lines.push(String::from_utf8(bytes).expect("JSON is UTF-8"));
            rest = tail;
        }
    }

    fn advance_track(&mut self, n: usize, lines: &mut Vec<String>) {
        let mut pending = Vec::with_capacity(n);
        for _ in 0..n {
            let Some(tracker) = self.tracker.as_mut() else {
                break;
            };
            let s = tracker.step(&mut self.plant);
            let f_norm = self.display.push(s.v_out);
            let f_smooth = self.display_smooth.push(s.v_out);
            pending.push(TrackPoint {
                i: s.iteration,
                v: s.v_out,
                f: if self.smooth { f_smooth } else { f_norm },
                e: s.error,
                locked: s.locked,
                sat: s.saturated,
            });
            if let Some(run) = self.run.as_mut() {
                run.push(s);
            }
            if self.was_locked && !s.locked {
                self.was_locked = false;
                self.push_frames(Samples::Track(std::mem::take(&mut pending)), lines);
                lines.push(Event::LockLost { iteration: s.iteration }.encode());
            }
        }
        self.push_frames(Samples::Track(pending), lines);
    }

    fn start_sweep(&self) -> Result<Sweep> {
        let [lo, hi] = self.cfg.scan.range;
        let lsb = self.plant.lsb();
        let codes = ((self.cfg.scan.step / lsb).round() as u64).max(1);
        let first = (lo / lsb).ceil() as u64;
        let last = (hi / lsb).floor() as u64;
        if last <= first {
            return Err(Error::Range("scan range spans less than one DAC code".into()));
        }
        let voltages = (first..=last).step_by(codes as usize).map(|c| c as f64 * lsb).collect();
        Ok(Sweep {
            voltages,
            readings: Vec::new(),
            step: codes as f64 * lsb,
        })
    }

    fn advance_scan(&mut self, n: usize, lines: &mut Vec<String>) {
        let mut pending = Vec::with_capacity(n);
        for _ in 0..n {
            if self.sweep.is_none() {
                match self.start_sweep() {
                    Ok(s) => self.sweep = Some(s),
                    Err(_) => break,
                }
            }
            let sweep = self.sweep.as_mut().expect("sweep started");
            let v = sweep.voltages[sweep.readings.len()];
            let reading = match self.plant.sample_averaged(v, self.cfg.scan.averaging) {
                Ok(r) => r.volts,
                Err(_) => break,
            };
            sweep.readings.push(reading);
            pending.push(ScanPoint { v_dac: v, v_adc: reading });
            if sweep.readings.len() == sweep.voltages.len() {
                let done = self.sweep.take().expect("sweep in progress");
                self.push_frames(Samples::Scan(std::mem::take(&mut pending)), lines);
                let cal = ScanTrace::from_readings(done.voltages[0], done.step, &done.readings, self.cfg.scan.averaging)
                    .and_then(|t| calib::calibrate(&t, &self.plant.config().vco, &self.cfg.calib));
                if let Ok(cal) = cal {
                    lines.push(Self::calibration_line(&cal));
                    self.calibration = Some(cal);
                }
            }
        }
        self.push_frames(Samples::Scan(pending), lines);
    }
}

fn split(samples: Samples, at: usize) -> (Samples, Samples) {
    match samples {
        Samples::Track(mut v) => {
            let tail = v.split_off(at.min(v.len()));
            (Samples::Track(v), Samples::Track(tail))
        }
        Samples::Scan(mut v) => {
            let tail = v.split_off(at.min(v.len()));
            (Samples::Scan(v), Samples::Scan(tail))
        }
    }
}
