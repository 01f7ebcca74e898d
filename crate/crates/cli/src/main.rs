use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resotrack_cli::experiment::{run_experiment, ExperimentName, ExperimentReport, ExperimentSpec, Knobs};
use resotrack_core::plant::{PlantConfig, PlantProfile};
use resotrack_core::Error;
use resotrack_service::{Profile, ServerConfig, SessionConfig};

/// Software-defined resonance tracker: scan, calibrate, lock and analyze a simulated plant.
#[derive(Debug, Parser)]
#[command(name = "resotrack", version)]
struct Cli {
    /// Plant configuration (JSON); overrides --plant.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in plant profile: ideal or hardware. Defaults depend on the command.
    #[arg(long, global = true, value_name = "PROFILE")]
    plant: Option<PlantProfile>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to out/<experiment>.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sweep the DAC over its range and locate the dip.
    Scan(Tune),
    /// Scan and derive V0, A_m, K, Q and depth.
    Calibrate(Tune),
    /// Calibrate, then lock and record the tracker output.
    Track(Tune),
    /// Run a named experiment and write its report.
    Experiment {
        /// scan, calibrate, track, snr-vs-ki, noise-psd, modulation-equivalence, acetone or emi.
        name: String,
        /// Knob overrides as a JSON object or a path to a JSON file.
        #[arg(long, value_name = "JSON|FILE")]
        knobs: Option<String>,
    },
    /// Serve the control and telemetry WebSockets.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// bench (2272 points/s) or console (1200 points/s with block pauses).
        #[arg(long, default_value = "bench")]
        profile: Profile,
        #[arg(long, default_value = "runs", value_name = "DIR")]
        runs_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Tune {
    /// Scan points over the full DAC range.
    #[arg(long)]
    scan_points: Option<usize>,
    /// Tracker points to record.
    #[arg(long)]
    points: Option<usize>,
    /// Integral gain as a fraction of K.
    #[arg(long)]
    gain: Option<f64>,
}

impl Tune {
    fn apply(&self, knobs: &mut Knobs) {
        if let Some(n) = self.scan_points {
            knobs.scan_points = n;
        }
        if let Some(n) = self.points {
            knobs.points = n;
        }
        if let Some(g) = self.gain {
            knobs.gain = g;
        }
    }
}

const EXIT_FAILED_CHECKS: u8 = 1;
const EXIT_CALIBRATION: u8 = 2;
const EXIT_INVALID: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_calibration_failure() => EXIT_CALIBRATION,
        Error::Config(_) | Error::Parameter(_) | Error::UnknownExperiment(_) | Error::Json(_) => EXIT_INVALID,
        _ => 1,
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn plant_config(cli: &Cli) -> Result<Option<PlantConfig>, Error> {
    match (&cli.config, cli.plant) {
        (Some(path), _) => PlantConfig::load(path)
            .map(Some)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        (None, Some(p)) => Ok(Some(PlantConfig::profile(p))),
        (None, None) => Ok(None),
    }
}

fn parse_knobs(arg: &str) -> Result<Knobs, Error> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(|e| Error::Config(format!("{arg}: {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("knobs: {e}")))
}

fn print_report(report: &ExperimentReport, out: &Path) {
    for c in &report.checks {
        println!(
            "{} {:<32} {:>14.6} {:<14} [{}]",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold,
            c.provenance.as_str()
        );
    }
    let passed = report.checks.iter().filter(|c| c.pass).count();
    println!("{}: {passed}/{} checks passed, output in {}", report.name, report.checks.len(), out.display());
}

fn run_batch(cli: &Cli, name: ExperimentName, knobs: Knobs) -> ExitCode {
    let plant = match plant_config(cli) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    let out = cli.out.clone().unwrap_or_else(|| Path::new("out").join(name.as_str()));
    let spec = ExperimentSpec {
        name,
        plant,
        seed: cli.seed,
        out_dir: out.clone(),
        knobs,
    };
    if let Err(e) = spec.validate() {
        return fail(EXIT_INVALID, e);
    }
    match run_experiment(&spec) {
        Ok(report) => {
            print_report(&report, &out);
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILED_CHECKS)
            }
        }
        Err(e) => fail(exit_code(&e), e),
    }
}

fn serve(cli: &Cli, listen: SocketAddr, profile: Profile, runs_dir: PathBuf) -> ExitCode {
    let plant = match plant_config(cli) {
        Ok(p) => p.unwrap_or_else(PlantConfig::hardware).with_seed(cli.seed),
        Err(e) => return fail(EXIT_INVALID, e),
    };
    let mut cfg = ServerConfig::new(listen, SessionConfig::new(plant));
    cfg.profile = profile;
    cfg.runs_dir = runs_dir;
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(1, e),
    };
    match rt.block_on(resotrack_service::serve(cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(resotrack_service::ServeError::Session(e)) => fail(exit_code(&e), e),
        Err(e) => fail(1, e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_INVALID);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let tuned = |tune: &Tune| {
        let mut k = Knobs::default();
        tune.apply(&mut k);
        k
    };
    match &cli.command {
        Command::Scan(t) => run_batch(&cli, ExperimentName::Scan, tuned(t)),
        Command::Calibrate(t) => run_batch(&cli, ExperimentName::Calibrate, tuned(t)),
        Command::Track(t) => run_batch(&cli, ExperimentName::Track, tuned(t)),
        Command::Experiment { name, knobs } => {
            let name: ExperimentName = match name.parse() {
                Ok(n) => n,
                Err(e) => return fail(EXIT_INVALID, e),
            };
            let knobs = match knobs.as_deref().map(parse_knobs).transpose() {
                Ok(k) => k.unwrap_or_default(),
                Err(e) => return fail(EXIT_INVALID, e),
            };
            run_batch(&cli, name, knobs)
        }
        Command::Serve {
            listen,
            profile,
            runs_dir,
        } => serve(&cli, *listen, *profile, runs_dir.clone()),
    }
}
