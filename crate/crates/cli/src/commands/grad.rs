//! `flowgrad grad`: sensitivity of one scalar quantity with respect to the
//! conditioning, written as a CSV map plus a JSON metadata sidecar.

use std::path::Path;

use serde::Serialize;

use flowgrad_core::adjoint::{compute_sensitivity, GradientMode, RunMetadata};
use flowgrad_core::error::Result;
use flowgrad_core::formats;
use flowgrad_core::noise::gaussian_noise;
use flowgrad_core::sampler::sample;

use crate::commands::{apply_mode, apply_seed, apply_solver, config_dir, out_dir, Overrides};
use crate::config::{load_config, GradConfig};

#[derive(Serialize)]
struct GradSummary<'a> {
    dq_dc_file: &'a str,
    q_value: f64,
    dq_dscalar: &'a [(String, f64)],
    metadata: &'a RunMetadata,
    config: &'a GradConfig,
}

pub fn run(config_path: &Path, overrides: &Overrides) -> Result<i32> {
    let config: GradConfig = load_config(config_path)?;
    let dir = out_dir(overrides, config.out_dir.as_ref())?;

    let field = config.field.resolve(&config_dir(config_path))?;
    let cond = config.conditioning.build()?;
    let grid = config.grid.build(overrides.steps)?;
    let solver = apply_solver(config.solver, overrides);
    let mode = apply_mode(config.mode, overrides);
    let seed = apply_seed(config.seed, overrides);

    let xi = gaussian_noise(&field.as_dyn().descriptor().state_shape, seed);
    let store = mode != GradientMode::Recompute;
    let traj = sample(field.as_dyn(), &xi, &cond, &grid, solver, store)?;
    let q_value = config.quantity.evaluate(traj.final_state())?;
    let g = config.quantity.gradient(traj.final_state())?;
    let mut result = compute_sensitivity(field.as_dyn(), &traj, &g, mode)?;
    result.metadata.seed = Some(seed);
    result.metadata.quantity = Some(config.quantity.label());

    formats::write_map_csv(&dir.join("dq_dc.csv"), &result.dq_dc)?;
    let summary = GradSummary {
        dq_dc_file: "dq_dc.csv",
        q_value,
        dq_dscalar: &result.dq_dscalar,
        metadata: &result.metadata,
        config: &config,
    };
    formats::write_json(&dir.join("grad_summary.json"), &summary)?;

    println!("gradient ({mode}) -> {}", dir.join("dq_dc.csv").display());
    Ok(0)
}
