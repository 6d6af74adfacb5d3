//! Noise-level grids for deterministic probability-flow sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RHO: f64 = 7.0;
pub const DEFAULT_SIGMA_MIN: f64 = 0.002;
pub const DEFAULT_SIGMA_MAX: f64 = 80.0;

/// Strictly decreasing noise levels `t_0 = sigma_max > ... > t_N = 0`
/// defining the discrete solver steps.
///
/// The final level is exactly zero; integrators never evaluate the velocity
/// there because the EDM velocity has a `1/t` singularity at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    levels: Vec<f64>,
    rho: f64,
    sigma_min: f64,
    sigma_max: f64,
}

/// Build the rho-spaced noise schedule with `n_steps` integration steps
/// (`n_steps + 1` levels, the last exactly zero):
///
/// `t_i = (sigma_max^(1/rho) + i/(n_steps-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`
///
/// for `i < n_steps`. With `n_steps = 1` the grid is `[sigma_max, 0]`.
pub fn edm_time_grid(n_steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<TimeGrid> {
    if n_steps < 1 {
        return Err(Error::Config("n_steps must be >= 1".into()));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::Config(format!(
            "need 0 < sigma_min < sigma_max, got sigma_min={sigma_min}, sigma_max={sigma_max}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }

    let mut levels = Vec::with_capacity(n_steps + 1);
    levels.push(sigma_max);
    if n_steps > 1 {
        let inv_rho = 1.0 / rho;
        let hi = sigma_max.powf(inv_rho);
        let lo = sigma_min.powf(inv_rho);
        for i in 1..n_steps - 1 {
            let frac = i as f64 / (n_steps - 1) as f64;
            levels.push((hi + frac * (lo - hi)).powf(rho));
        }
        // the boundary levels are pinned exactly; only interior ones go
        // through the power formula
        levels.push(sigma_min);
    }
    levels.push(0.0);

    let strictly_decreasing = levels.windows(2).all(|w| w[0] > w[1]);
    if !strictly_decreasing {
        return Err(Error::Config("schedule parameters produce a non-decreasing grid".into()));
    }
    Ok(TimeGrid { levels, rho, sigma_min, sigma_max })
}

impl TimeGrid {
    /// Rebuild a grid from stored levels (deserialization path).
    pub fn from_parts(levels: Vec<f64>, rho: f64, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if levels.len() < 2 || levels.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Format("grid levels must be strictly decreasing".into()));
        }
        if *levels.last().unwrap() != 0.0 {
            return Err(Error::Format("final grid level must be exactly zero".into()));
        }
        if levels[0] != sigma_max {
            return Err(Error::Format("first grid level must equal sigma_max".into()));
        }
        Ok(TimeGrid { levels, rho, sigma_min, sigma_max })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Number of integration steps (one less than the level count).
    pub fn n_steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}
