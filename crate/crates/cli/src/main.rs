//! `optima`: configuration-driven solve, simulate, verify and oracle runs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "optima", version, about = "Optimal consumption and investment under homogeneous state preferences")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides `problem.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `problem.n_paths`.
    #[arg(long, global = true)]
    paths: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Solve the configured problem and tabulate the optimal processes.
    Solve,
    /// Simulate the configured market and write the path CSV.
    Simulate,
    /// Run the diagnostic suite.
    Verify,
    /// Compare the solver against the binomial oracle.
    Oracle,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = commands::Overrides { out: cli.out, seed: cli.seed, paths: cli.paths };
    let result = commands::Context::load(cli.config.as_deref(), overrides).and_then(|ctx| match cli.command {
        Command::Solve => commands::solve(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Verify => commands::verify(&ctx),
        Command::Oracle => commands::oracle(&ctx),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("optima: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
