//! `flowgrad sample`: one deterministic probability-flow sample, written as
//! a trajectory container plus the final state as a CSV map.

use std::path::Path;

use serde::Serialize;

use flowgrad_core::error::Result;
use flowgrad_core::formats;
use flowgrad_core::noise::gaussian_noise;
use flowgrad_core::sampler::sample;

use crate::commands::{apply_seed, apply_solver, config_dir, out_dir, Overrides};
use crate::config::{load_config, SampleConfig};

#[derive(Serialize)]
struct SampleSummary<'a> {
    trajectory: &'a str,
    x0: &'a str,
    seed: u64,
    field: String,
    config: &'a SampleConfig,
}

pub fn run(config_path: &Path, overrides: &Overrides) -> Result<i32> {
    let config: SampleConfig = load_config(config_path)?;
    let dir = out_dir(overrides, config.out_dir.as_ref())?;

    let field = config.field.resolve(&config_dir(config_path))?;
    let cond = config.conditioning.build()?;
    let grid = config.grid.build(overrides.steps)?;
    let solver = apply_solver(config.solver, overrides);
    let seed = apply_seed(config.seed, overrides);

    let xi = gaussian_noise(&field.as_dyn().descriptor().state_shape, seed);
    let traj = sample(field.as_dyn(), &xi, &cond, &grid, solver, config.store)?;

    formats::save_trajectory(&dir.join("trajectory.fgt1"), &traj)?;
    formats::write_map_csv(&dir.join("x0.csv"), traj.final_state())?;
    let summary = SampleSummary {
        trajectory: "trajectory.fgt1",
        x0: "x0.csv",
        seed,
        field: field.as_dyn().descriptor().name,
        config: &config,
    };
    formats::write_json(&dir.join("sample_summary.json"), &summary)?;

    println!("sampled {} levels -> {}", traj.grid().levels().len(), dir.display());
    Ok(0)
}
