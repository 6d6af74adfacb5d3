//! `flowgrad check`: the fixed-noise gradient self-consistency protocol
//! over a conditioning series, with an optional walk-amplitude sweep.

use std::path::Path;

use serde::Serialize;

use flowgrad_core::consistency::{run_check, CheckRun};
use flowgrad_core::error::{Error, Result};
use flowgrad_core::formats;
use flowgrad_core::noise::gaussian_noise;
use flowgrad_core::state::Conditioning;

use crate::commands::{apply_mode, apply_seed, apply_solver, config_dir, out_dir, Overrides};
use crate::config::{load_config, scalar_names, CheckConfig, FieldSpec};

#[derive(Serialize, Clone)]
struct RunSummary {
    amplitude: f64,
    records_file: String,
    n_records: usize,
    rmse: f64,
    relative_rmse: f64,
    delta_q_std: f64,
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    runs: Vec<RunSummary>,
    config: &'a CheckConfig,
}

/// Conditionings along the series: `c = interp(tau)` plus tau as a scalar
/// conditioner when the model consumes one.
pub fn series_conditionings(
    field_spec: &FieldSpec,
    config_dir: &Path,
    series: &flowgrad_core::ConditioningSeries,
    taus: &[f64],
    tau_name: &str,
) -> Result<Vec<Conditioning>> {
    let names = scalar_names(field_spec, config_dir)?;
    if !(names.is_empty() || names == [tau_name.to_string()]) {
        return Err(Error::Config(format!(
            "field consumes scalar conditioners {names:?}; series runs support none or ['{tau_name}']"
        )));
    }
    taus.iter()
        .map(|&tau| {
            let c = series.interp(tau)?;
            let scalars = if names.is_empty() {
                vec![]
            } else {
                vec![(tau_name.to_string(), tau)]
            };
            Conditioning::new(c, scalars)
        })
        .collect()
}

/// Scale the walk around its first entry: `cond_k -> cond_0 + amp * (cond_k - cond_0)`.
fn scale_walk(conds: &[Conditioning], amplitude: f64) -> Result<Vec<Conditioning>> {
    let base = &conds[0];
    conds
        .iter()
        .map(|cond| {
            let dc = cond.c().sub(base.c());
            let ds: Vec<(String, f64)> = base
                .scalars()
                .iter()
                .zip(cond.scalars())
                .map(|((name, v0), (_, v1))| (name.clone(), v1 - v0))
                .collect();
            base.add_scaled(amplitude, &dc, &ds)
        })
        .collect()
}

fn write_records_csv(path: &Path, run: &CheckRun) -> Result<()> {
    let mut out = String::from("k,q,delta_q,linearized,residual\n");
    for r in &run.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.index,
            formats::fmt_f64(r.q),
            formats::fmt_f64(r.delta_q),
            formats::fmt_f64(r.linearized),
            formats::fmt_f64(r.residual()),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn run(config_path: &Path, overrides: &Overrides) -> Result<i32> {
    let config: CheckConfig = load_config(config_path)?;
    let dir = out_dir(overrides, config.out_dir.as_ref())?;
    let cfg_dir = config_dir(config_path);

    let field = config.field.resolve(&cfg_dir)?;
    let grid = config.grid.build(overrides.steps)?;
    let solver = apply_solver(config.solver, overrides);
    let mode = apply_mode(config.mode, overrides);
    let seed = apply_seed(config.seed, overrides);

    let series_path =
        if config.series_csv.is_relative() { cfg_dir.join(&config.series_csv) } else { config.series_csv.clone() };
    let meta = match &config.series_meta {
        Some(p) => {
            let p = if p.is_relative() { cfg_dir.join(p) } else { p.clone() };
            Some(formats::read_json(&p)?)
        }
        None => {
            let sidecar = formats::sidecar_path(&series_path);
            if sidecar.exists() { Some(formats::read_json(&sidecar)?) } else { None }
        }
    };
    let series = formats::read_series_csv(&series_path, meta.as_ref())?;

    let taus = config.taus.times()?;
    if taus.len() < 2 {
        return Err(Error::Config("check needs at least two evaluation times".into()));
    }
    let conds = series_conditionings(&config.field, &cfg_dir, &series, &taus, &config.tau_name)?;
    let xi = gaussian_noise(&field.as_dyn().descriptor().state_shape, seed);

    let amplitudes = config.amplitude_sweep.clone().unwrap_or_else(|| vec![1.0]);
    let sweeping = config.amplitude_sweep.is_some();
    let mut runs = Vec::new();
    for (i, &amp) in amplitudes.iter().enumerate() {
        let scaled = scale_walk(&conds, amp)?;
        let run = run_check(field.as_dyn(), &config.quantity, &scaled, &xi, &grid, solver, mode)?;
        let file = if sweeping { format!("check_amp{i}.csv") } else { "check.csv".to_string() };
        write_records_csv(&dir.join(&file), &run)?;
        let s = run.summary();
        runs.push(RunSummary {
            amplitude: amp,
            records_file: file,
            n_records: s.n_records,
            rmse: s.rmse,
            relative_rmse: s.relative_rmse,
            delta_q_std: s.delta_q_std,
        });
    }

    formats::write_json(&dir.join("check_summary.json"), &CheckOutput { runs: runs.clone(), config: &config })?;
    for r in &runs {
        println!(
            "amplitude {}: {} records, rmse {:.3e}, relative {:.3e}",
            r.amplitude, r.n_records, r.rmse, r.relative_rmse
        );
    }
    Ok(0)
}
