//! `inversion-lab`: run, verify and sweep experiments from a TOML config.
//!
//! Exit codes: 0 all checks passed, 1 a checked property failed, 2 bad
//! config or usage, 3 training diverged.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inversion_core::experiment::{
    exit_code_for, run_experiment, sweep, verify, Check, EtaSetting, ExperimentConfig, ExperimentKind, EXIT_CONFIG,
    EXIT_PASS, EXIT_PROPERTY_FAILURE,
};
use inversion_core::Error;

#[derive(Parser)]
#[command(name = "inversion-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv, summary.json and plots.svg.
    Run(RunArgs),
    /// Check the pretrained state against its closed forms.
    Verify(Common),
    /// Run the experiment once per value of one numeric key.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config; every key is optional.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long, value_parser = parse_kind)]
    experiment: Option<ExperimentKind>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory (default: config `out_dir`, else `runs/<experiment>`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Fixed learning rate; omit to search for eta*.
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Key to vary (overrides `sweep_param`).
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated values (overrides `sweep_values`).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(kind) = common.experiment {
        cfg.experiment = kind;
    }
    Ok(cfg)
}

fn out_dir(explicit: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    explicit
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(cfg.experiment.as_str()))
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

fn cmd_run(args: RunArgs) -> Result<i32, Error> {
    let mut cfg = load(&args.common)?;
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(eta) = args.eta {
        cfg.eta = EtaSetting::Fixed(eta);
    }
    cfg.validate()?;
    let dir = out_dir(&args.out, &cfg);
    let outcome = run_experiment(&cfg, &dir)?;
    println!("experiment {} -> {}", cfg.experiment, dir.display());
    print_checks(&outcome.result.checks);
    Ok(outcome.exit_code)
}

fn cmd_verify(args: Common) -> Result<i32, Error> {
    let report = verify(&load(&args)?)?;
    print!("{}", report.to_table());
    Ok(if report.passed() { EXIT_PASS } else { EXIT_PROPERTY_FAILURE })
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, Error> {
    let mut cfg = load(&args.common)?;
    if let Some(p) = args.param {
        cfg.sweep_param = Some(p);
    }
    if let Some(v) = args.values {
        cfg.sweep_values = v;
    }
    let dir = out_dir(&args.out, &cfg);
    let rows = sweep(&cfg, &dir)?;
    for r in &rows {
        let status = if r.passed { "PASS" } else { "FAIL" };
        match &r.error {
            Some(e) => println!("[{status}] {} (exit {}): {e}", r.dir.display(), r.exit_code),
            None => println!("[{status}] {} (exit {})", r.dir.display(), r.exit_code),
        }
    }
    println!("aggregate: {}", dir.join("aggregate.csv").display());
    Ok(if rows.iter().all(|r| r.passed) { EXIT_PASS } else { EXIT_PROPERTY_FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    let code = result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code_for(&e)
    });
    debug_assert!((0..=EXIT_CONFIG + 1).contains(&code));
    ExitCode::from(code as u8)
}
