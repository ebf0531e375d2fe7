//! `birl`: generate demonstrations, run samplers and evaluate posteriors.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use valuewalk::experiment::Method;

use commands::{Bench, Eval, EvalMode, GenDemos};
use config::Overrides;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("chains did not converge: max R-hat {0:.4} exceeds {1}")]
    NotConverged(f64, f64),
    #[error(transparent)]
    Core(#[from] valuewalk::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::NotConverged(..) => 2,
            _ => 1,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: valuewalk::Error| e.to_string())
}

#[derive(Parser)]
#[command(name = "birl", version, about = "Bayesian inverse reinforcement learning with ValueWalk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Apprentice,
    Heldout,
    Report,
}

#[derive(Subcommand)]
enum Command {
    /// Sample expert demonstrations from a known environment.
    GenDemos {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 3.0)]
        alpha: f64,
        /// Gridworld steps (default 50); truncates LineWorld demonstrations.
        #[arg(long)]
        n_steps: Option<usize>,
        /// LineWorld episodes (default 40).
        #[arg(long)]
        n_episodes: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run posterior chains described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        n_chains: Option<usize>,
        #[arg(long)]
        n_warmup: Option<usize>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rhat_threshold: Option<f64>,
    },
    /// Seconds per effective sample against gridworld size.
    BenchScaling {
        #[arg(long, value_delimiter = ',', default_value = "3,6,12")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "valuewalk,policywalk,policywalk-hmc")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        nuts_samples: usize,
        #[arg(long, default_value_t = 50_000)]
        policywalk_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 100)]
        n_episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Held-out demonstrations (heldout mode).
        #[arg(long)]
        test_demos: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        #[arg(long, default_value_t = 500)]
        max_draws: usize,
    },
    /// Recompute R-hat and ESS for a run directory.
    Diag {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1.01)]
        rhat_threshold: f64,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("BIRL_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| CliError::Usage(format!("BIRL_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(CliError::Usage("BIRL_THREADS must be positive".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenDemos { env, alpha, n_steps, n_episodes, seed, out } => {
            commands::gen_demos(&GenDemos { env, alpha, n_steps, n_episodes, seed, out })
        }
        Command::Run { config, out, method, n_chains, n_warmup, n_samples, seed, rhat_threshold } => {
            let o = Overrides { method, n_chains, n_warmup, n_samples, seed, rhat_threshold };
            commands::run(&config, &out, &o)
        }
        Command::BenchScaling { sizes, methods, seed, nuts_samples, policywalk_samples, out } => {
            commands::bench(&Bench { sizes, methods, seed, nuts_samples, policywalk_samples, out })
        }
        Command::Eval { run, env, mode, n_episodes, seed, test_demos, bins, max_draws } => {
            let mode = match mode {
                Mode::Apprentice => EvalMode::Apprentice,
                Mode::Heldout => EvalMode::Heldout,
                Mode::Report => EvalMode::Report,
            };
            commands::eval(&Eval { dir: run, env, mode, n_episodes, seed, test_demos, bins, max_draws })
        }
        Command::Diag { run, rhat_threshold } => commands::diag(&run, rhat_threshold),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
