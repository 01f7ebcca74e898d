//! Run directories: `config.json`, `calibration.csv`, `raw.csv`, `filtered.csv`, `report.csv`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use resotrack_core::calib::CalibrationResult;
use resotrack_core::dsp;
use resotrack_core::plant::PlantConfig;
use resotrack_core::tracker::{self, TrackerConfig, TrackerSample};
use resotrack_core::Result;
use serde::{Deserialize, Serialize};

use crate::session::{RunSnapshot, DISPLAY_WINDOW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub plant: PlantConfig,
    pub tracker: TrackerConfig,
    pub dropped_points: u64,
}

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub calibration: CalibrationResult,
    pub raw: Vec<TrackerSample>,
    pub filtered: Vec<f64>,
}

/// `run-<unix millis>-seed<seed>`.
pub fn run_dir_name(started_unix_ms: u128, seed: u64) -> String {
    format!("run-{started_unix_ms}-seed{seed}")
}

/// Median-filtered v_out; the window shrinks to the largest odd length that fits.
pub fn filtered(samples: &[TrackerSample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let v: Vec<f64> = samples.iter().map(|s| s.v_out).collect();
    let window = if v.len() >= DISPLAY_WINDOW {
        DISPLAY_WINDOW
    } else {
        (v.len() - 1) | 1
    };
    dsp::median_filter(&v, window.min(v.len()))
}

/// `key,value` analysis of a run.
pub fn analyze(samples: &[TrackerSample], filtered: &[f64]) -> Vec<(String, f64)> {
    let mut rows = vec![
        ("points".to_string(), samples.len() as f64),
        (
            "locked_fraction".to_string(),
            if samples.is_empty() {
                0.0
            } else {
                samples.iter().filter(|s| s.locked).count() as f64 / samples.len() as f64
            },
        ),
    ];
    let v: Vec<f64> = samples.iter().map(|s| s.v_out).collect();
    if let Ok(s) = dsp::series_stats(&v) {
        rows.extend([
            ("mean".to_string(), s.mean),
            ("std".to_string(), s.std),
            ("snr_db".to_string(), s.snr_db),
            ("skewness".to_string(), s.skewness),
            ("excess_kurtosis".to_string(), s.excess_kurtosis),
        ]);
    }
    if let Ok(s) = dsp::series_stats(filtered) {
        rows.push(("filtered_snr_db".to_string(), s.snr_db));
    }
    rows
}

fn write_pairs<W: Write>(rows: &[(String, f64)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["key", "value"])?;
    for (k, v) in rows {
        out.write_record([k.as_str(), &v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

fn create(path: PathBuf) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Writes the run under `runs_dir/<name>` and returns the directory.
pub fn persist_run(runs_dir: &Path, name: &str, run: &RunSnapshot) -> Result<PathBuf> {
    let dir = runs_dir.join(name);
    fs::create_dir_all(&dir)?;
    let config = RunConfig {
        seed: run.seed,
        plant: run.plant.clone(),
        tracker: run.tracker.clone(),
        dropped_points: run.dropped,
    };
    let mut f = create(dir.join("config.json"))?;
    serde_json::to_writer_pretty(&mut f, &config)?;
    f.write_all(b"\n")?;
    f.flush()?;
    run.calibration.write_csv(create(dir.join("calibration.csv"))?)?;
    tracker::write_run_csv(&run.samples, create(dir.join("raw.csv"))?)?;
    let filt = filtered(&run.samples)?;
    let mut out = csv::Writer::from_writer(create(dir.join("filtered.csv"))?);
    out.write_record(["iteration", "filtered"])?;
    for (s, f) in run.samples.iter().zip(&filt) {
        out.write_record([s.iteration.to_string(), f.to_string()])?;
    }
    out.flush()?;
    write_pairs(&analyze(&run.samples, &filt), create(dir.join("report.csv"))?)?;
    Ok(dir)
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let open = |name: &str| -> Result<BufReader<fs::File>> { Ok(BufReader::new(fs::File::open(dir.join(name))?)) };
    let config: RunConfig = serde_json::from_reader(open("config.json")?)?;
    let calibration = CalibrationResult::read_csv(open("calibration.csv")?)?;
    let raw = tracker::read_run_csv(open("raw.csv")?)?;
    let mut reader = csv::Reader::from_reader(open("filtered.csv")?);
    let filtered = reader
        .records()
        .map(|r| {
            let r = r?;
            r.get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| resotrack_core::Error::Parameter("malformed filtered.csv row".into()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LoadedRun {
        config,
        calibration,
        raw,
        filtered,
    })
}

/// Report rows as written in `report.csv`.
pub fn read_report(dir: &Path) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::Reader::from_path(dir.join("report.csv"))?;
    reader
        .records()
        .map(|r| {
            let r = r?;
            let key = r.get(0).unwrap_or_default().to_string();
            let value = r
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| resotrack_core::Error::Parameter("malformed report.csv row".into()))?;
            Ok((key, value))
        })
        .collect()
}
