//! Command-line front end: code generation, scenario execution, parameter
//! sweeps, capacity bounds, stored-capture demodulation, and threshold
//! calibration.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! runtime failures. Progress and diagnostics go to standard error; data
//! goes to files or standard output only.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asbit::codes::{default_family, verify_preferred_pair};
use asbit::io;
use asbit::metrics::{self, CapacityParams};
use asbit::netsim::{self, ScenarioConfig};
use asbit::rx::DemodMode;

#[derive(Parser)]
#[command(name = "asbit", version, about = "Gold-coded backscatter network simulator")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a spreading code and its family correlation summary.
    Codegen(CodegenArgs),
    /// Run one scenario end to end and write the run directory.
    Simulate(SimulateArgs),
    /// Run a parameter sweep and write CSV plus metadata.
    Sweep(SweepArgs),
    /// Evaluate the analytic capacity bound.
    Capacity(CapacityArgs),
    /// Demodulate a stored I/Q capture against a run configuration.
    Demod(DemodArgs),
    /// Sweep the detection threshold on a noise-only run.
    CalibrateThreshold(CalibrateArgs),
}

#[derive(Args)]
struct CodegenArgs {
    /// Register degree (shipped families: 5, 7, 9, 13).
    #[arg(long, default_value_t = 13)]
    degree: u32,
    /// Code seed (cyclic shift of the second register; the top two values
    /// select the bare sequences).
    #[arg(long, default_value_t = 0)]
    seed: u32,
    /// Truncation length in chips.
    #[arg(long, default_value_t = 511)]
    length: usize,
    /// Output directory.
    #[arg(long, default_value = "codes-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override (wins over the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep kind.
    #[arg(long, value_parser = ["nodes", "snr", "codelen", "heatmap"])]
    kind: String,
    /// Sweep configuration (JSON: base scenario plus grid).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CapacityArgs {
    /// Spread bandwidth W in Hz.
    #[arg(long, default_value_t = 10.22e6)]
    bandwidth_hz: f64,
    /// Pre-spreading bit rate R in Hz.
    #[arg(long, default_value_t = 20.0e3)]
    bit_rate_hz: f64,
    /// Required Eb/N0 in dB.
    #[arg(long, default_value_t = 7.0)]
    ebn0_db: f64,
    /// Noise-to-signal power ratio eta/S (linear).
    #[arg(long, default_value_t = 0.0)]
    eta_over_s: f64,
    /// Event-traffic duty fraction in (0, 1].
    #[arg(long, default_value_t = 0.05)]
    utilization: f64,
}

#[derive(Args)]
struct DemodArgs {
    /// Run directory holding config.json, iq.bin, and iq.json.
    #[arg(long)]
    run_dir: PathBuf,
    /// Output NDJSON path (defaults to detections.ndjson in the run dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Detection mode override.
    #[arg(long, value_parser = ["continuous", "discrete"])]
    mode: Option<String>,
    /// Threshold multiplier override.
    #[arg(long)]
    threshold_k: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Scenario configuration whose rx/noise settings to calibrate (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Target false-alarm rate per event bin.
    #[arg(long, default_value_t = 1e-4)]
    target_far: f64,
    /// Probe duration in seconds.
    #[arg(long, default_value_t = 1.0)]
    duration_s: f64,
}

/// Errors that should exit with the usage/configuration code.
fn is_config_error(err: &asbit::Error) -> bool {
    !matches!(err, asbit::Error::Io(_))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    let threads = cli.threads;
    let outcome = asbit::par::with_threads(threads, move || run(cli.command));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(RunError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum RunError {
    Config(String),
    Runtime(String),
}

impl From<asbit::Error> for RunError {
    fn from(err: asbit::Error) -> Self {
        if is_config_error(&err) {
            RunError::Config(err.to_string())
        } else {
            RunError::Runtime(err.to_string())
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(err: std::io::Error) -> Self {
        RunError::Runtime(err.to_string())
    }
}

fn run(command: Command) -> Result<(), RunError> {
    match command {
        Command::Codegen(args) => codegen(args),
        Command::Simulate(args) => simulate(args),
        Command::Sweep(args) => sweep(args),
        Command::Capacity(args) => capacity(args),
        Command::Demod(args) => demod(args),
        Command::CalibrateThreshold(args) => calibrate(args),
    }
}

fn codegen(args: CodegenArgs) -> Result<(), RunError> {
    let family = default_family(args.degree)?;
    let code = family.code(args.seed, args.length)?;
    std::fs::create_dir_all(&args.out)?;
    io::write_code_text(&args.out.join("code.txt"), &code)?;
    io::write_code_binary(
        &args.out.join("code.bin"),
        &args.out.join("code.json"),
        &code,
    )?;

    let (first, second) = family.specs();
    let (preferred, values) = verify_preferred_pair(first, second)?;
    log::info!("wrote code files to {}", args.out.display());
    println!(
        "{}",
        serde_json::json!({
            "degree": args.degree,
            "seed": args.seed,
            "length": args.length,
            "family_size": family.family_size(),
            "preferred_pair": preferred,
            "cross_correlation_values": values.into_iter().collect::<Vec<_>>(),
        })
    );
    Ok(())
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, RunError> {
    let mut config: ScenarioConfig = io::read_json(path)
        .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn simulate(args: SimulateArgs) -> Result<(), RunError> {
    let config = load_scenario(&args.config, args.seed)?;
    log::info!(
        "running scenario: {} nodes, {} targets, {} s",
        config.n_nodes,
        config.n_targets,
        config.duration_s
    );
    let report = netsim::run_scenario(&config)?;
    io::write_run_dir(&args.out, &report)?;
    eprintln!(
        "mean EER {:.3e}, aggregate EER {:.3e} ({} misses, {} false, {} true events)",
        report.errors.mean_eer,
        report.errors.aggregate_eer,
        report.errors.total_misses,
        report.errors.total_false_detections,
        report.errors.total_true_events,
    );
    println!("{}", args.out.display());
    Ok(())
}

/// Grid specification wrapped around a base scenario.
#[derive(serde::Deserialize)]
struct SweepConfig {
    base: ScenarioConfig,
    #[serde(default)]
    n_values: Vec<usize>,
    #[serde(default)]
    background_rates_hz: Vec<f64>,
    #[serde(default)]
    snr_values_db: Vec<f64>,
    #[serde(default)]
    code_lengths: Vec<usize>,
    #[serde(default)]
    rates_hz: Vec<f64>,
}

fn sweep(args: SweepArgs) -> Result<(), RunError> {
    let mut config: SweepConfig = io::read_json(&args.config)
        .map_err(|e| RunError::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        config.base.master_seed = seed;
    }
    config.base.validate()?;

    let require = |name: &str, empty: bool| -> Result<(), RunError> {
        if empty {
            Err(RunError::Config(format!(
                "sweep kind {:?} needs a non-empty {name} array",
                args.kind
            )))
        } else {
            Ok(())
        }
    };

    let table = match args.kind.as_str() {
        "nodes" => {
            require("n_values", config.n_values.is_empty())?;
            require("background_rates_hz", config.background_rates_hz.is_empty())?;
            metrics::sweep_nodes(&config.base, &config.n_values, &config.background_rates_hz)?
        }
        "snr" => {
            require("n_values", config.n_values.is_empty())?;
            require("snr_values_db", config.snr_values_db.is_empty())?;
            metrics::sweep_snr(&config.base, &config.n_values, &config.snr_values_db)?
        }
        "codelen" => {
            require("code_lengths", config.code_lengths.is_empty())?;
            metrics::sweep_code_length(&config.base, &config.code_lengths)?
        }
        "heatmap" => {
            require("n_values", config.n_values.is_empty())?;
            require("rates_hz", config.rates_hz.is_empty())?;
            metrics::capacity_heatmap(&config.base, &config.n_values, &config.rates_hz)?
        }
        other => return Err(RunError::Config(format!("unknown sweep kind {other:?}"))),
    };
    io::write_sweep(&args.out, &args.kind, &table)?;
    eprintln!("{} rows -> {}", table.rows.len(), args.out.display());
    Ok(())
}

fn capacity(args: CapacityArgs) -> Result<(), RunError> {
    let params = CapacityParams {
        s_power: 1.0,
        eta_noise: args.eta_over_s,
        bandwidth_hz: args.bandwidth_hz,
        bit_rate_hz: args.bit_rate_hz,
        ebn0_linear: 10f64.powf(args.ebn0_db / 10.0),
        utilization: args.utilization,
    };
    let bound = metrics::capacity_bound(&params)?;
    println!("{}", serde_json::to_string_pretty(&bound).unwrap());
    Ok(())
}

fn demod(args: DemodArgs) -> Result<(), RunError> {
    let config_path = args.run_dir.join("config.json");
    let mut config = load_scenario(&config_path, None)?;
    if let Some(mode) = &args.mode {
        config.rx.mode = Some(match mode.as_str() {
            "discrete" => DemodMode::Discrete,
            _ => DemodMode::Continuous,
        });
    }
    if let Some(k) = args.threshold_k {
        if k <= 0.0 {
            return Err(RunError::Config("threshold_k must be positive".into()));
        }
        config.rx.threshold_k = k;
    }

    let (iq, _sidecar) = io::read_iq(&args.run_dir.join("iq.bin"), &args.run_dir.join("iq.json"))
        .map_err(|e| RunError::Config(format!("capture: {e}")))?;
    let reports = netsim::demod_capture(&config, &iq)?;
    let out = args
        .out
        .unwrap_or_else(|| args.run_dir.join("detections.ndjson"));
    io::write_detections_ndjson(&out, &reports)?;
    eprintln!(
        "{} detections -> {}",
        reports.iter().map(|r| r.detections.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<(), RunError> {
    let config = load_scenario(&args.config, None)?;
    let table = netsim::calibrate_threshold(&config, args.duration_s, args.target_far)?;
    println!("{}", serde_json::to_string_pretty(&table).unwrap());
    Ok(())
}
