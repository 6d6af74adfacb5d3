//! `flowgrad map`: batch-averaged sensitivity maps over a conditioning
//! list, with optional monthly grouping and a PGM heatmap.

use std::path::Path;

use serde::Serialize;

use flowgrad_core::adjoint::batch_sensitivity;
use flowgrad_core::error::{Error, Result};
use flowgrad_core::formats;
use flowgrad_core::state::Conditioning;

use crate::commands::{apply_mode, apply_solver, config_dir, out_dir, Overrides};
use crate::config::{load_config, month_of_tau, Grouping, MapConfig};

#[derive(Serialize)]
struct SampleLine {
    index: usize,
    seed: u64,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct GroupLine {
    key: usize,
    count: usize,
    file: String,
}

#[derive(Serialize)]
struct MapSummary<'a> {
    mean_file: &'a str,
    n_ok: usize,
    n_failed: usize,
    mean_dq_dscalar: &'a [(String, f64)],
    #[serde(skip_serializing_if = "Option::is_none")]
    pgm: Option<PgmInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<Vec<GroupLine>>,
    per_sample: Vec<SampleLine>,
    config: &'a MapConfig,
}

#[derive(Serialize)]
struct PgmInfo {
    file: String,
    min: f64,
    max: f64,
}

fn conditionings(config: &MapConfig, cfg_dir: &Path) -> Result<(Vec<Conditioning>, Vec<f64>)> {
    match (&config.conditionings, &config.series_csv, &config.taus) {
        (Some(list), None, None) => {
            let conds: Vec<Conditioning> =
                list.iter().map(|c| c.build()).collect::<Result<_>>()?;
            let taus = conds
                .iter()
                .map(|c| c.scalar(&config.tau_name).unwrap_or(0.0))
                .collect();
            Ok((conds, taus))
        }
        (None, Some(series_csv), Some(tau_spec)) => {
            let series_path =
                if series_csv.is_relative() { cfg_dir.join(series_csv) } else { series_csv.clone() };
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
            let taus = tau_spec.times()?;
            let conds = super::check::series_conditionings(
                &config.field,
                cfg_dir,
                &series,
                &taus,
                &config.tau_name,
            )?;
            Ok((conds, taus))
        }
        _ => Err(Error::Config(
            "map needs either explicit 'conditionings' or 'series_csv' + 'taus'".into(),
        )),
    }
}

pub fn run(config_path: &Path, overrides: &Overrides) -> Result<i32> {
    let config: MapConfig = load_config(config_path)?;
    let dir = out_dir(overrides, config.out_dir.as_ref())?;
    let cfg_dir = config_dir(config_path);

    let field = config.field.resolve(&cfg_dir)?;
    let grid = config.grid.build(overrides.steps)?;
    let solver = apply_solver(config.solver, overrides);
    let mode = apply_mode(config.mode, overrides);
    let mut seed_policy = config.seed_policy;
    if let Some(seed) = overrides.seed {
        seed_policy = match seed_policy {
            flowgrad_core::SeedPolicy::Fixed { .. } => flowgrad_core::SeedPolicy::Fixed { seed },
            flowgrad_core::SeedPolicy::PerSample { .. } => {
                flowgrad_core::SeedPolicy::PerSample { base_seed: seed }
            }
        };
    }

    let (conds, taus) = conditionings(&config, &cfg_dir)?;
    let groups: Option<Vec<usize>> = match config.grouping {
        Grouping::None => None,
        Grouping::Month => Some(taus.iter().map(|&t| month_of_tau(t)).collect()),
    };

    let batch = batch_sensitivity(
        field.as_dyn(),
        &conds,
        &config.quantity,
        seed_policy,
        &grid,
        solver,
        mode,
        groups.as_deref(),
    )?;

    formats::write_map_csv(&dir.join("mean_map.csv"), &batch.mean_dq_dc)?;
    let pgm = if config.pgm {
        let (min, max) = formats::write_pgm(&dir.join("mean_map.pgm"), &batch.mean_dq_dc)?;
        Some(PgmInfo { file: "mean_map.pgm".into(), min, max })
    } else {
        None
    };

    let group_lines = match &batch.group_means {
        Some(gm) => {
            let mut lines = Vec::with_capacity(gm.len());
            for g in gm {
                let file = format!("group_{:02}.csv", g.key);
                formats::write_map_csv(&dir.join(&file), &g.dq_dc)?;
                lines.push(GroupLine { key: g.key, count: g.count, file });
            }
            Some(lines)
        }
        None => None,
    };

    let per_sample: Vec<SampleLine> = batch
        .per_sample
        .iter()
        .map(|s| SampleLine {
            index: s.index,
            seed: s.seed,
            ok: s.outcome.is_ok(),
            error: s.outcome.as_ref().err().cloned(),
        })
        .collect();

    let summary = MapSummary {
        mean_file: "mean_map.csv",
        n_ok: batch.n_ok,
        n_failed: batch.n_failed,
        mean_dq_dscalar: &batch.mean_dq_dscalar,
        pgm,
        groups: group_lines,
        per_sample,
        config: &config,
    };
    formats::write_json(&dir.join("map_summary.json"), &summary)?;

    println!(
        "averaged {} of {} samples -> {}",
        batch.n_ok,
        conds.len(),
        dir.join("mean_map.csv").display()
    );
    Ok(0)
}
