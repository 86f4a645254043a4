//! Command-line front end for penalized kriging.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Misuse of the command line detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "sparsekrige", version, about = "Penalized kriging with automatic neighbor selection")]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "SPARSEKRIGE_THREADS")]
    threads: Option<usize>,

    /// JSON or TOML file supplying option defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a variogram model by weighted least squares.
    FitVariogram(commands::FitArgs),
    /// Predict on a grid with global, local or penalized kriging.
    Predict(commands::PredictArgs),
    /// Run the practical-range sweep on simulated locations.
    Sweep(commands::SweepArgs),
    /// Effective sample size of a dataset, a neighborhood or an equicorrelated sample.
    Ess(commands::EssArgs),
    /// Trace the penalty-selection criterion at one prediction site.
    TraceEta(commands::TraceArgs),
    /// Simulate a Gaussian random field.
    Simulate(commands::SimulateArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<sparsekrige::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let cfg = cli.config.as_deref();
    let result = match cli.command {
        Command::FitVariogram(a) => commands::fit_variogram(a, cfg),
        Command::Predict(a) => commands::predict(a, cfg),
        Command::Sweep(a) => commands::sweep(a, cfg),
        Command::Ess(a) => commands::ess(a, cfg),
        Command::TraceEta(a) => commands::trace_eta(a, cfg),
        Command::Simulate(a) => commands::simulate(a, cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
