mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ConfigFlags, RunConfig, SEED_ENV};

/// Video-to-text discretization on synthetic video data.
#[derive(Parser, Debug)]
#[command(name = "vtd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(RunArgs),
    /// Train prompts and cross-attention; writes checkpoint.vtdw and metrics.csv.
    Train(RunArgs),
    /// Evaluate a checkpoint; writes report.json and report.txt.
    Eval(RunArgs),
    /// Print per-frame assignments and fusion weights for selected videos.
    Inspect(RunArgs),
    /// Draw a base/novel class split; writes split.json.
    Split(RunArgs),
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// `key = value` config file; flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.flags, std::env::var(SEED_ENV).ok())
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&a.resolve()?),
        Command::Train(a) => commands::train(&a.resolve()?),
        Command::Eval(a) => commands::eval(&a.resolve()?),
        Command::Inspect(a) => commands::inspect(&a.resolve()?),
        Command::Split(a) => commands::split(&a.resolve()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
