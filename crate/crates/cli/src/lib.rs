//! Command implementations behind the `modalfuse` binary.

pub mod ablate;
pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod table;

use args::{Cli, Command};
use error::{CliError, CliResult};

pub const THREADS_ENV: &str = "MODALFUSE_THREADS";

/// Caps the global rayon pool when `MODALFUSE_THREADS` is set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => ablate::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
        Command::Params(a) => commands::params(a),
    }
}
