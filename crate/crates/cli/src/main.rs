//! `pnrcal`: detector model, simulator and self-calibration from the shell.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pnrcal::calibration::ScanSource;

use config::RunConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "pnrcal", version, about = "Multiplexed detector model and reference-free efficiency calibration")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set eta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for simulation (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output path prefix; without it the main table goes to stdout.
    #[arg(long, global = true)]
    out: Option<String>,

    /// Gate duration used to convert `dark_hz` to a per-gate probability.
    #[arg(long = "gate-ns", global = true)]
    gate_ns: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the loss, finite-size, dark, cross-talk and composed matrices.
    Matrix {
        /// Fail unless every column sums to 1.
        #[arg(long)]
        check: bool,
    },
    /// Analytic click distribution for the configured source.
    Predict {
        #[arg(long)]
        check: bool,
    },
    /// Monte Carlo click histogram on the detector grid.
    Simulate,
    /// Synthetic attenuation scan.
    SynthScan,
    /// Fit one or more scans and report the efficiencies.
    Calibrate {
        #[arg(required = true)]
        scans: Vec<PathBuf>,
        /// Also fit the full square-root odds of single-mode squeezed light.
        #[arg(long = "exact-smsv")]
        exact_smsv: bool,
        /// Override the light source recorded in the scan files.
        #[arg(long, value_parser = parse_scan_source)]
        source: Option<ScanSource>,
    },
    /// Compare calibrations across scans taken at different brightness.
    Sweep { scans: Vec<PathBuf> },
    /// Two-detector coincidence estimate.
    Klyshko {
        /// Measured `S1,S2,C`; simulated from the config when absent.
        #[arg(long)]
        counts: Option<String>,
    },
}

fn parse_scan_source(s: &str) -> Result<ScanSource, String> {
    s.parse().map_err(|e: pnrcal::Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for spec in &cli.overrides {
        cfg.apply_override(spec)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(gate) = cli.gate_ns {
        cfg.gate_ns = Some(gate);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Matrix { check } => commands::matrix(&cfg, *check),
        Command::Predict { check } => commands::predict(&cfg, *check),
        Command::Simulate => commands::simulate(&cfg),
        Command::SynthScan => commands::synth_scan(&cfg),
        Command::Calibrate {
            scans,
            exact_smsv,
            source,
        } => commands::calibrate(&cfg, scans, *exact_smsv, *source),
        Command::Sweep { scans } => commands::sweep(&cfg, scans),
        Command::Klyshko { counts } => {
            let counts = counts.as_deref().map(commands::parse_counts).transpose()?;
            commands::klyshko(&cfg, counts)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
