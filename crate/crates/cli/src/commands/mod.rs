//! Subcommand implementations. Every command reads a JSON config, applies
//! the command-line overrides, runs the core pipeline, and writes its
//! outputs into the resolved directory. All writes are pure functions of
//! (config, overrides), so reruns are byte-identical.

pub mod check;
pub mod grad;
pub mod map;
pub mod sample;
pub mod train;
pub mod verify;

use std::path::{Path, PathBuf};

use flowgrad_core::adjoint::GradientMode;
use flowgrad_core::error::{Error, Result};
use flowgrad_core::sampler::Solver;

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub solver: Option<Solver>,
    pub mode: Option<GradientMode>,
    pub out: Option<PathBuf>,
}

/// Resolve the output directory (flag wins over config) and create it.
pub fn out_dir(overrides: &Overrides, config_dir: Option<&PathBuf>) -> Result<PathBuf> {
    let dir = overrides
        .out
        .clone()
        .or_else(|| config_dir.cloned())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Directory containing the config file, for resolving relative paths.
pub fn config_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

pub fn apply_solver(config_value: Solver, overrides: &Overrides) -> Solver {
    overrides.solver.unwrap_or(config_value)
}

pub fn apply_mode(config_value: GradientMode, overrides: &Overrides) -> GradientMode {
    overrides.mode.unwrap_or(config_value)
}

pub fn apply_seed(config_value: u64, overrides: &Overrides) -> u64 {
    overrides.seed.unwrap_or(config_value)
}

/// Map an error to the documented exit code: 2 for configuration/input
/// problems, 3 for numerical failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_input_error() {
        2
    } else {
        3
    }
}
