#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mfault::Error;

mod commands;
mod config;

use commands::Command;
use config::RunConfig;

/// Multiplicative fault estimation: filter and input design, simulation and
/// error bounds. Without --config the built-in pendulum-cart demo runs.
#[derive(Parser, Debug)]
#[command(name = "mfault", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: the config's `output`, else runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::NoLeftInverse { .. } | Error::SingularDescriptor | Error::DimensionMismatch(_) => 3,
        Error::NoAnnihilator { .. }
        | Error::RankDeficientM { .. }
        | Error::UnstablePole(_)
        | Error::InsufficientDegree { .. }
        | Error::ImproperFilter { .. }
        | Error::ConversionUnsupported(_)
        | Error::ClosureIncomplete(_) => 4,
        Error::UnstableSystem(_) | Error::RankDeficientWindow { .. } | Error::SingularPeriodMatrix => 5,
    }
}

fn run(cli: &Cli) -> mfault::Result<PathBuf> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.override_seed(s);
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    commands::run(cli.command, &cfg, &dir)?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}: wrote {}", cli.command.name(), dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
