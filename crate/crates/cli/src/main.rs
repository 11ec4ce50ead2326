mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use heterodyn::Error;

#[derive(Parser, Debug)]
#[command(name = "heterodyn", version, about = "Experiments on unimodal maps with heteroscedastic noise")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Model configuration file (`key = value` lines).
    #[arg(long, global = true, default_value = "configs/reference.conf")]
    pub config: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for replica ensembles.
    #[arg(long, global = true, env = "HETERODYN_THREADS")]
    pub threads: Option<usize>,
    /// Also write two-column plot files.
    #[arg(long, global = true)]
    pub plot_data: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the model assumptions.
    Validate,
    /// Simulate a trajectory of states and observations.
    Simulate(commands::SimulateArgs),
    /// Stationary density and spectral summary of the transfer operator.
    Stationary(commands::StationaryArgs),
    /// Filter stability from two different priors.
    Filter(commands::FilterArgs),
    /// Concentration, CLT and large-deviation diagnostics.
    Stats(commands::StatsArgs),
    /// Gumbel, Poisson, point-process and GEV experiments.
    Evt(commands::EvtArgs),
    /// Estimate the observation modulation from block maxima.
    DetectS(commands::DetectArgs),
}

/// Failure of a run, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl RunError {
    fn kind(&self) -> &'static str {
        match self {
            RunError::Core(e) => e.kind(),
            RunError::Usage(_) => "usage",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            RunError::Core(e) if e.is_runtime_statistical() => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
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
            let message = e.to_string().replace('"', "'");
            eprintln!("error kind={} message=\"{}\"", e.kind(), message);
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(RunError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Usage(e.to_string()))?;
    }
    let ctx = commands::Context::load(&cli.common)?;
    match cli.command {
        Command::Validate => commands::validate(&ctx),
        Command::Simulate(a) => commands::simulate(&ctx, &a),
        Command::Stationary(a) => commands::stationary(&ctx, &a),
        Command::Filter(a) => commands::filter(&ctx, &a),
        Command::Stats(a) => commands::stats(&ctx, &a),
        Command::Evt(a) => commands::evt(&ctx, &a),
        Command::DetectS(a) => commands::detect_s(&ctx, &a),
    }
}
