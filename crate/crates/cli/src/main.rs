//! `flowgrad`: experiment runner for adjoint sensitivity extraction from
//! probability-flow samplers.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 numerical
//! failure, 4 verification failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use flowgrad_core::adjoint::GradientMode;
use flowgrad_core::sampler::Solver;

use commands::Overrides;

#[derive(Parser)]
#[command(name = "flowgrad", version, about = "Adjoint sensitivity extraction for flow samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file for the subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's solver step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the solver (euler | heun).
    #[arg(long)]
    solver: Option<Solver>,
    /// Override the gradient mode (stored | recompute | discrete).
    #[arg(long)]
    mode: Option<GradientMode>,
    /// Worker threads for batch sampling (never changes results).
    #[arg(long)]
    parallel: Option<usize>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy denoiser checkpoint.
    Train(CommonArgs),
    /// Run one deterministic sample and store the trajectory.
    Sample(CommonArgs),
    /// Compute a sensitivity map for one conditioning.
    Grad(CommonArgs),
    /// Run the fixed-noise gradient self-consistency check.
    Check(CommonArgs),
    /// Average sensitivity maps over a conditioning list.
    Map(CommonArgs),
    /// Verify gradients against the oracle suite.
    Verify(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Train(a)
            | Command::Sample(a)
            | Command::Grad(a)
            | Command::Check(a)
            | Command::Map(a)
            | Command::Verify(a) => a,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let common = cli.command.common();

    if let Some(n) = common.parallel {
        // batch reductions are order-fixed, so the pool size can never
        // change results; ignore failures from double initialization
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }

    let overrides = Overrides {
        seed: common.seed,
        steps: common.steps,
        solver: common.solver,
        mode: common.mode,
        out: common.out.clone(),
    };
    let config_path = common.config.clone();

    let result = match &cli.command {
        Command::Train(_) => commands::train::run(&config_path, &overrides),
        Command::Sample(_) => commands::sample::run(&config_path, &overrides),
        Command::Grad(_) => commands::grad::run(&config_path, &overrides),
        Command::Check(_) => commands::check::run(&config_path, &overrides),
        Command::Map(_) => commands::map::run(&config_path, &overrides),
        Command::Verify(_) => commands::verify::run(&config_path, &overrides),
    };

    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(commands::exit_code(&err));
        }
    }
}
