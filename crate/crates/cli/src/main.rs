//! Command-line entry point. Subcommands map onto the experiment tasks; every
//! run is driven by a flat key=value config file with flag overrides.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod config;
mod runner;

use config::Task;
use runner::Run;

#[derive(Parser)]
#[command(
    name = "divlvm",
    version,
    about = "Experiment runner for diversity-promoting latent variable models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the mixture-of-experts classifier (vi, mh, or pr)
    TrainBmem(RunArgs),
    /// Fit the nonparametric latent feature model by Gibbs sweeps
    TrainIlfm(RunArgs),
    /// Score a stored checkpoint against a dataset
    Eval(RunArgs),
    /// Draw components from the sequential diversity prior
    SamplePrior(RunArgs),
    /// Recompute angle and magnitude diagnostics for a checkpoint
    Diagnose(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to a key = value configuration file
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the worker count (default 1; higher counts run extra
    /// restarts or chains)
    #[arg(long)]
    workers: Option<usize>,
    /// Use the strict literal update rules in the samplers instead of the
    /// corrected defaults
    #[arg(long)]
    strict_paper: bool,
}

fn main() {
    let cli = Cli::parse();
    let (task, args) = match cli.command {
        Command::TrainBmem(a) => (Task::TrainBmem, a),
        Command::TrainIlfm(a) => (Task::TrainIlfm, a),
        Command::Eval(a) => (Task::Eval, a),
        Command::SamplePrior(a) => (Task::SamplePrior, a),
        Command::Diagnose(a) => (Task::Diagnose, a),
    };
    let run = Run {
        task,
        config_path: args.config,
        seed: args.seed,
        out: args.out,
        workers: args.workers,
        strict_paper: args.strict_paper,
    };
    if let Err(e) = runner::run(run) {
        eprintln!("error: {e}");
        std::process::exit(runner::exit_code(&e));
    }
}
