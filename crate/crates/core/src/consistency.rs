//! Gradient self-consistency harness.
//!
//! The check compares the model against itself: with the noise sample held
//! fixed, consecutive conditionings in a series produce output differences
//! `delta_q = q_{k+1} - q_k`, which are matched against the gradient-based
//! linearization `<dq/dc, delta_c> + sum_k dq/ds_k * delta_s_k`. Forward
//! differences are used, with the gradient evaluated at the earlier entry.
//! Agreement is summarized by the RMSE over records, alongside a relative
//! form normalized by the spread of `delta_q`.

use serde::Serialize;

use crate::adjoint::{compute_sensitivity, GradientMode, SensitivityResult};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::quantity::QuantitySpec;
use crate::sampler::{sample, Solver};
use crate::state::{Conditioning, StateVector};
use crate::velocity::VelocityField;

/// One consecutive-pair comparison.
#[derive(Debug, Clone)]
pub struct CheckRecord {
    /// Index of the earlier series entry.
    pub index: usize,
    /// Quantity at the earlier entry.
    pub q: f64,
    /// `q_{k+1} - q_k`.
    pub delta_q: f64,
    /// `<w_T, delta_c> + sum v_T * delta_s` with gradients at entry k.
    pub linearized: f64,
    pub delta_c: StateVector,
    pub delta_scalars: Vec<(String, f64)>,
}

impl CheckRecord {
    pub fn residual(&self) -> f64 {
        self.delta_q - self.linearized
    }
}

/// Multi-conditioner linearization `<dq_dc, delta_c> + sum dq_ds * delta_s`.
pub fn linearized_delta(
    result: &SensitivityResult,
    delta_c: &StateVector,
    delta_scalars: &[(String, f64)],
) -> Result<f64> {
    if !delta_c.same_shape(&result.dq_dc) {
        return Err(Error::Contract("delta_c shape does not match gradient map".into()));
    }
    let mut total = result.dq_dc.dot(delta_c);
    for (name, ds) in delta_scalars {
        let grad = result
            .dq_dscalar
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| *g)
            .ok_or_else(|| Error::Contract(format!("no gradient for scalar '{name}'")))?;
        total += grad * ds;
    }
    Ok(total)
}

/// `sqrt( mean( (delta_q - linearized)^2 ) )` over the records.
pub fn rmse(records: &[CheckRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("rmse needs at least one record".into()));
    }
    let mean_sq =
        records.iter().map(|r| r.residual() * r.residual()).sum::<f64>() / records.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Population standard deviation of the `delta_q` values.
fn delta_q_std(records: &[CheckRecord]) -> f64 {
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.delta_q).sum::<f64>() / n;
    (records.iter().map(|r| (r.delta_q - mean) * (r.delta_q - mean)).sum::<f64>() / n).sqrt()
}

/// Check output: records plus absolute and relative RMSE.
#[derive(Debug)]
pub struct CheckRun {
    pub records: Vec<CheckRecord>,
    pub rmse: f64,
    /// RMSE / std(delta_q); zero when the series is constant.
    pub relative_rmse: f64,
}

/// Summary block for JSON reports.
#[derive(Debug, Clone, Serialize)]
pub struct CheckSummary {
    pub n_records: usize,
    pub rmse: f64,
    pub relative_rmse: f64,
    pub delta_q_std: f64,
}

impl CheckRun {
    pub fn summary(&self) -> CheckSummary {
        CheckSummary {
            n_records: self.records.len(),
            rmse: self.rmse,
            relative_rmse: self.relative_rmse,
            delta_q_std: delta_q_std(&self.records),
        }
    }
}

/// Run the fixed-noise self-consistency protocol over a conditioning series.
///
/// For each entry: sample with the shared `xi`, evaluate `q`, and compute
/// gradients at that conditioning. Records pair consecutive entries.
pub fn run_check(
    field: &dyn VelocityField,
    q_spec: &QuantitySpec,
    cond_series: &[Conditioning],
    xi: &StateVector,
    grid: &TimeGrid,
    solver: Solver,
    gradient_mode: GradientMode,
) -> Result<CheckRun> {
    if cond_series.len() < 2 {
        return Err(Error::Contract("consistency check needs at least two conditionings".into()));
    }
    let store = gradient_mode != GradientMode::Recompute;

    let mut qs = Vec::with_capacity(cond_series.len());
    let mut grads = Vec::with_capacity(cond_series.len());
    for (k, cond) in cond_series.iter().enumerate() {
        let traj = sample(field, xi, cond, grid, solver, store).map_err(|e| match e {
            Error::Divergence { step, detail } => Error::Divergence {
                step,
                detail: format!("sample {k}: {detail}"),
            },
            other => other,
        })?;
        qs.push(q_spec.evaluate(traj.final_state())?);
        let g = q_spec.gradient(traj.final_state())?;
        grads.push(compute_sensitivity(field, &traj, &g, gradient_mode)?);
    }

    let mut records = Vec::with_capacity(cond_series.len() - 1);
    for k in 0..cond_series.len() - 1 {
        let delta_c = cond_series[k + 1].c().sub(cond_series[k].c());
        let delta_scalars: Vec<(String, f64)> = cond_series[k]
            .scalars()
            .iter()
            .zip(cond_series[k + 1].scalars())
            .map(|((name, v0), (name1, v1))| {
                if name != name1 {
                    return Err(Error::Contract(format!(
                        "scalar conditioner order differs between entries {k} and {}",
                        k + 1
                    )));
                }
                Ok((name.clone(), v1 - v0))
            })
            .collect::<Result<_>>()?;
        let linearized = linearized_delta(&grads[k], &delta_c, &delta_scalars)?;
        records.push(CheckRecord {
            index: k,
            q: qs[k],
            delta_q: qs[k + 1] - qs[k],
            linearized,
            delta_c,
            delta_scalars,
        });
    }

    let rmse_value = rmse(&records)?;
    let std = delta_q_std(&records);
    let relative_rmse = if std == 0.0 { if rmse_value == 0.0 { 0.0 } else { f64::INFINITY } } else { rmse_value / std };
    Ok(CheckRun { records, rmse: rmse_value, relative_rmse })
}

/// Total derivative `dq/dc = w_T + v_T * dtau/dc` for runs where the
/// vector conditioner is itself a function of tau.
pub fn total_derivative(result: &SensitivityResult, dtau_dc: &StateVector) -> Result<StateVector> {
    if !dtau_dc.same_shape(&result.dq_dc) {
        return Err(Error::Contract("dtau_dc shape does not match gradient map".into()));
    }
    let v_tau = result
        .dq_dscalar
        .iter()
        .find(|(n, _)| n == "tau")
        .map(|(_, g)| *g)
        .ok_or_else(|| Error::Contract("result carries no 'tau' gradient".into()))?;
    Ok(result.dq_dc.add_scaled(v_tau, dtau_dc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::RunMetadata;
    use crate::grid::edm_time_grid;
    use crate::noise::gaussian_noise;
    use crate::state::Matrix;
    use crate::velocity::AnalyticGaussianField;

    fn sv(v: Vec<f64>) -> StateVector {
        StateVector::from_vec(v).unwrap()
    }

    fn fake_result(dq_dc: Vec<f64>, scalars: Vec<(&str, f64)>) -> SensitivityResult {
        SensitivityResult {
            dq_dc: sv(dq_dc),
            dq_dscalar: scalars.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
            dq_dx_t: sv(vec![0.0]),
            metadata: RunMetadata {
                field: "test".into(),
                solver: Solver::Heun,
                mode: "discrete".into(),
                n_steps: 1,
                sigma_min: 0.002,
                sigma_max: 80.0,
                rho: 7.0,
                seed: None,
                quantity: None,
            },
        }
    }

    fn record(delta_q: f64, linearized: f64) -> CheckRecord {
        CheckRecord {
            index: 0,
            q: 0.0,
            delta_q,
            linearized,
            delta_c: sv(vec![0.0]),
            delta_scalars: vec![],
        }
    }

    #[test]
    fn linearized_delta_zero_for_zero_deltas() {
        let r = fake_result(vec![1.0, 2.0, 3.0], vec![("tau", 0.5)]);
        let got =
            linearized_delta(&r, &StateVector::zeros(&[3]), &[("tau".into(), 0.0)]).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn basis_probe_reads_gradient_component() {
        let r = fake_result(vec![1.5, -2.5, 4.0], vec![]);
        let got = linearized_delta(&r, &sv(vec![0.0, 1.0, 0.0]), &[]).unwrap();
        assert_eq!(got, -2.5);
    }

    #[test]
    fn unknown_scalar_name_is_contract_error() {
        let r = fake_result(vec![1.0], vec![("tau", 0.5)]);
        let e = linearized_delta(&r, &sv(vec![0.0]), &[("zeta".into(), 1.0)]);
        assert!(matches!(e, Err(Error::Contract(_))));
    }

    #[test]
    fn rmse_hand_values() {
        assert_eq!(rmse(&[record(1.0, 1.0), record(-3.0, -3.0)]).unwrap(), 0.0);
        // residuals +1 and -1 -> rmse 1
        assert_eq!(rmse(&[record(1.0, 0.0), record(0.0, 1.0)]).unwrap(), 1.0);
        assert!(rmse(&[]).is_err());
    }

    #[test]
    fn rmse_is_permutation_invariant_and_nonnegative() {
        let a = vec![record(0.3, 0.1), record(-0.2, 0.4), record(1.0, 0.9)];
        let mut b = a.clone();
        b.reverse();
        let ra = rmse(&a).unwrap();
        assert_eq!(ra, rmse(&b).unwrap());
        assert!(ra >= 0.0);
    }

    #[test]
    fn exactly_linear_map_with_exact_gradients_floors_the_rmse() {
        // analytic field + discrete adjoint: the sampled discrete map is
        // exactly linear in c, so first-order expansion is exact
        let m = Matrix::new(3, 2, vec![0.5, -0.2, 0.8, 0.4, -0.6, 0.1]).unwrap();
        let field = AnalyticGaussianField::new(m, 1.0).unwrap();
        let xi = gaussian_noise(&[3], 9);
        let grid = edm_time_grid(32, 0.002, 80.0, 7.0).unwrap();
        let q = QuantitySpec::WeightedGlobalMean { lat_weighted: false, channel: None };

        let conds: Vec<Conditioning> = (0..6)
            .map(|k| {
                Conditioning::vector_only(sv(vec![0.2 + 0.07 * k as f64, -0.1 + 0.03 * k as f64]))
            })
            .collect();
        let run =
            run_check(&field, &q, &conds, &xi, &grid, Solver::Heun, GradientMode::Discrete)
                .unwrap();
        assert_eq!(run.records.len(), 5);
        let q_scale = run.records[0].q.abs().max(1.0);
        assert!(run.rmse < 1e-10 * q_scale, "rmse {}", run.rmse);
    }

    #[test]
    fn constant_series_has_zero_rmse() {
        let m = Matrix::new(2, 1, vec![1.0, -1.0]).unwrap();
        let field = AnalyticGaussianField::new(m, 1.0).unwrap();
        let xi = gaussian_noise(&[2], 5);
        let grid = edm_time_grid(12, 0.002, 80.0, 7.0).unwrap();
        let q = QuantitySpec::Component { index: 0, channel: None };
        let conds = vec![Conditioning::vector_only(sv(vec![0.4])); 4];
        let run =
            run_check(&field, &q, &conds, &xi, &grid, Solver::Heun, GradientMode::Stored).unwrap();
        assert!(run.records.iter().all(|r| r.delta_q == 0.0 && r.linearized == 0.0));
        assert_eq!(run.rmse, 0.0);
        assert_eq!(run.relative_rmse, 0.0);
    }

    #[test]
    fn total_derivative_reduces_to_w_when_either_factor_vanishes() {
        let r = fake_result(vec![1.0, 2.0], vec![("tau", 0.0)]);
        let d = total_derivative(&r, &sv(vec![5.0, 5.0])).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0]);

        let r = fake_result(vec![1.0, 2.0], vec![("tau", 3.0)]);
        let d = total_derivative(&r, &StateVector::zeros(&[2])).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0]);

        let d = total_derivative(&r, &sv(vec![0.5, -0.5])).unwrap();
        assert_eq!(d.data(), &[2.5, 0.5]);
    }

    #[test]
    fn total_derivative_requires_tau() {
        let r = fake_result(vec![1.0], vec![("zeta", 1.0)]);
        assert!(matches!(total_derivative(&r, &sv(vec![0.0])), Err(Error::Contract(_))));
    }
}
