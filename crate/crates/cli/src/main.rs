use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slimbio_cli::Command;

#[derive(Parser)]
#[command(name = "slimbio", version, about = "Compress, run and benchmark small convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Paths {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Prune and/or quantize a model.
    Compress(Paths),
    /// Tiled inference with metrics and a report row.
    Infer(Paths),
    /// Sparsity sweep over pruning criteria.
    Sweep(Paths),
    /// Latency and energy benchmark.
    Bench(Paths),
    /// Write synthetic phantom datasets.
    Datagen(Paths),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (cmd, paths) = match cli.command {
        Sub::Compress(p) => (Command::Compress, p),
        Sub::Infer(p) => (Command::Infer, p),
        Sub::Sweep(p) => (Command::Sweep, p),
        Sub::Bench(p) => (Command::Bench, p),
        Sub::Datagen(p) => (Command::Datagen, p),
    };
    match slimbio_cli::run(cmd, &paths.config, paths.out.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
