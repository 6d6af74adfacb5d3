//! `flowgrad train`: fit a toy denoiser and write the checkpoint, its
//! architecture sidecar, the loss history and a config echo.

use std::path::Path;

use serde::Serialize;

use flowgrad_core::error::Result;
use flowgrad_core::formats;
use flowgrad_core::training::train;

use crate::config::{load_config, CheckpointMeta, ScalarDecl, TrainConfig};
use crate::commands::{out_dir, Overrides};

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint: &'a str,
    steps_run: usize,
    final_loss: Option<f64>,
    config: &'a TrainConfig,
}

pub fn run(config_path: &Path, overrides: &Overrides) -> Result<i32> {
    let config: TrainConfig = load_config(config_path)?;
    let dir = out_dir(overrides, config.out_dir.as_ref())?;

    let task = config.task.build()?;
    let arch = config.arch.build()?;
    let hyper = config.hyper.build(overrides.steps);

    let output = train(&task, &arch, &hyper)?;

    let ckpt = dir.join("model.fgv1");
    formats::save_mlp(&ckpt, output.denoiser.net())?;

    let meta = CheckpointMeta {
        state_dim: task.data_dim,
        cond_dim: task.cond_dim,
        sigma_data: arch.sigma_data,
        widths: output.denoiser.net().widths().to_vec(),
        scalars: config
            .arch
            .scalar_names
            .iter()
            .zip(&arch.scalar_scales)
            .map(|(name, scale)| ScalarDecl { name: name.clone(), scale: *scale })
            .collect(),
    };
    formats::write_json(&formats::sidecar_path(&ckpt), &meta)?;

    let mut loss_csv = String::new();
    for (step, loss) in output.loss_history.iter().enumerate() {
        loss_csv.push_str(&format!("{step},{}\n", formats::fmt_f64(*loss)));
    }
    std::fs::write(dir.join("loss_history.csv"), loss_csv)?;

    let summary = TrainSummary {
        checkpoint: "model.fgv1",
        steps_run: output.loss_history.len(),
        final_loss: output.loss_history.last().copied(),
        config: &config,
    };
    formats::write_json(&dir.join("train_summary.json"), &summary)?;

    println!("trained {} steps -> {}", output.loss_history.len(), ckpt.display());
    Ok(0)
}
