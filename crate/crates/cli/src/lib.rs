//! Command-line pipeline: compress, infer, sweep, bench and datagen, each
//! driven by a JSON [`config::RunConfig`].

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{cmd_bench, cmd_compress, cmd_datagen, cmd_infer, cmd_sweep};
pub use config::{Command, RunConfig};
pub use error::CliError;

use std::path::Path;

/// Loads the config for `cmd` and runs it; see [`CliError::exit_code`].
pub fn run(cmd: Command, config: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config, cmd)?;
    match cmd {
        Command::Compress => cmd_compress(&cfg, out).map(drop),
        Command::Infer => cmd_infer(&cfg, out).map(drop),
        Command::Sweep => cmd_sweep(&cfg, out).map(drop),
        Command::Bench => cmd_bench(&cfg, out).map(drop),
        Command::Datagen => cmd_datagen(&cfg, out).map(drop),
    }
}
