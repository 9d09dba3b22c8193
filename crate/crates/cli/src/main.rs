//! `qlimit`: simulate photon-count frames of parametric masks, compute their
//! precision limits, reconstruct them and score the reconstructions.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(qlimit::Error),
}

impl From<qlimit::Error> for CliError {
    fn from(e: qlimit::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) if e.is_numerical() => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "qlimit", version, about = "Precision limits and estimator scoring for photon-limited images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; a fresh one is drawn and recorded when omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra key=value settings, applied after the config file.
    #[arg(global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render truth images and their parameters.
    Generate(Common),
    /// Sample Poisson frames from the truth.
    Simulate(Common),
    /// Fisher matrix, covariance bound and per-pixel limit maps.
    Bounds(Common),
    /// Reconstruct every frame.
    Estimate(Common),
    /// Score reconstructions against truth and limits.
    Evaluate(Common),
    /// generate, simulate, bounds, estimate and evaluate over an n_bar sweep.
    Reproduce(Common),
}

fn resolve(common: &Common) -> Result<config::RunConfig, CliError> {
    let mut pairs = match &common.config {
        Some(p) => config::read_file(p)?,
        None => Default::default(),
    };
    let overrides = config::parse_pairs(&common.set.join("\n"), "command line")?;
    pairs.extend(overrides);
    if let Some(s) = common.seed {
        pairs.insert("seed".into(), s.to_string());
    }
    if let Some(o) = &common.out {
        pairs.insert("out".into(), o.display().to_string());
    }
    config::RunConfig::from_pairs(&pairs, qlimit::seed::entropy_seed())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Generate(c) => ("generate", c),
        Command::Simulate(c) => ("simulate", c),
        Command::Bounds(c) => ("bounds", c),
        Command::Estimate(c) => ("estimate", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Reproduce(c) => ("reproduce", c),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let cfg = resolve(common)?;
    let ctx = commands::Context::new(cfg, common.force);
    match cli.command {
        Command::Generate(_) => commands::generate(&ctx),
        Command::Simulate(_) => commands::simulate(&ctx),
        Command::Bounds(_) => commands::bounds(&ctx),
        Command::Estimate(_) => commands::estimate(&ctx),
        Command::Evaluate(_) => commands::evaluate(&ctx),
        Command::Reproduce(_) => commands::reproduce(&ctx),
    }?;
    ctx.write_resolved(name)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qlimit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
