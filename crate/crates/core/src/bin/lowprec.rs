use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lowprec::harness::{self, ExperimentConfig, ExperimentKind};
use lowprec::{Error, FloatFormat, UpdatePolicy};

/// Bit-exact simulation of 16-bit-FPU training experiments.
#[derive(Parser)]
#[command(name = "lowprec", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment the config describes (default: the least-squares figure).
    Run(RunArgs),
    /// Format x policy sweep with one summary row per pair.
    Sweep(RunArgs),
    /// Validate the convergence bounds and write the validator CSV.
    BoundsCheck(BoundsArgs),
    /// Nearest-policy run logging the fraction of cancelled updates.
    Cancellation(RunArgs),
    /// Print the constants of the preset formats, or of `--format`.
    Formats(FormatsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight format, e.g. E8M7, BF16, E5M10.
    #[arg(long, value_parser = parse_format)]
    format: Option<FloatFormat>,
    /// nearest | stochastic | kahan | kahan-stochastic | master32
    #[arg(long, value_parser = parse_policy)]
    policy: Option<UpdatePolicy>,
    /// Run a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FormatsArgs {
    #[arg(long, value_parser = parse_format)]
    format: Option<FloatFormat>,
}

fn parse_format(s: &str) -> Result<FloatFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<UpdatePolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn base_config(path: Option<&PathBuf>, kind: ExperimentKind, force_kind: bool) -> Result<ExperimentConfig, Error> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(kind),
    };
    if force_kind {
        cfg.kind = kind;
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(f) = args.format {
        cfg.format = f;
        if !cfg.formats.is_empty() {
            cfg.formats = vec![f];
        }
    }
    if let Some(p) = args.policy {
        cfg.policy = p;
        if !cfg.policies.is_empty() {
            cfg.policies = vec![p];
        }
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(n) = args.steps {
        cfg.steps = n;
    }
    if let Some(o) = &args.out {
        cfg.output_path = Some(o.clone());
    }
}

/// `run` keeps the config's kind; the other subcommands force theirs.
fn from_args(a: &RunArgs, kind: ExperimentKind, force_kind: bool) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = base_config(a.config.as_ref(), kind, force_kind)?;
    apply_overrides(&mut cfg, a);
    let out = cfg.output_dir();
    Ok((cfg, out))
}

fn format_table(formats: &[FloatFormat]) -> String {
    let mut s = String::from("format\twidth\tbias\tepsilon\tmax_finite\tmin_normal\tmin_subnormal\n");
    for f in formats {
        s.push_str(&format!(
            "{f}\t{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\n",
            f.width(),
            f.bias(),
            f.machine_epsilon(),
            f.max_finite(),
            f.min_positive_normal(),
            f.min_positive_subnormal()
        ));
    }
    s
}

fn execute(cmd: Cmd) -> Result<harness::RunOutcome, Error> {
    let (cfg, out) = match cmd {
        Cmd::Formats(a) => {
            let formats = a.format.map_or_else(|| FloatFormat::presets().to_vec(), |f| vec![f]);
            print!("{}", format_table(&formats));
            return Ok(harness::RunOutcome::default());
        }
        Cmd::BoundsCheck(a) => {
            let mut cfg = base_config(a.config.as_ref(), ExperimentKind::BoundsCheck, true)?;
            if cfg.bounds.is_none() {
                cfg.bounds = Some(Default::default());
            }
            if let Some(o) = a.out {
                cfg.output_path = Some(o);
            }
            let out = cfg.output_dir();
            (cfg, out)
        }
        Cmd::Run(a) => from_args(&a, ExperimentKind::LsqFigure, false)?,
        Cmd::Sweep(a) => from_args(&a, ExperimentKind::FormatSweep, true)?,
        Cmd::Cancellation(a) => from_args(&a, ExperimentKind::Cancellation, true)?,
    };
    harness::run_experiment(&cfg, &out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.cmd) {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for line in &outcome.summary {
                println!("{line}");
            }
            if outcome.numerical_failure {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
