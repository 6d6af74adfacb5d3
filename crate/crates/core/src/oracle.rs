//! Independent ground-truth gradient sources.
//!
//! Everything here exists to verify the adjoint routes and depends only on
//! the sampler and quantity layers; nothing in the library depends on it.
//!
//! - [`fd_directional`]: central finite differences of `q` through the full
//!   discrete sampler, in a joint `(delta_c, delta_scalars)` direction.
//! - [`gaussian_closed_form`]: the exact endpoint map of the linear
//!   Gaussian probability-flow ODE and its conditioning Jacobian. The
//!   derivation (solve `dy/dt = t y / (s^2 + t^2)`, so `y` scales with
//!   `sqrt(s^2 + t^2)`) is cross-checked against a dense ODE solve in the
//!   tests before anything trusts it.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::quantity::QuantitySpec;
use crate::sampler::{sample, Solver};
use crate::state::{Conditioning, Matrix, StateVector};
use crate::velocity::VelocityField;

/// A joint perturbation direction over the conditioning inputs.
#[derive(Debug, Clone)]
pub struct Direction {
    pub delta_c: StateVector,
    pub delta_scalars: Vec<(String, f64)>,
}

impl Direction {
    pub fn vector_only(delta_c: StateVector) -> Self {
        Direction { delta_c, delta_scalars: Vec::new() }
    }
}

fn q_at(
    field: &dyn VelocityField,
    q_spec: &QuantitySpec,
    cond: &Conditioning,
    xi: &StateVector,
    grid: &TimeGrid,
    solver: Solver,
) -> Result<f64> {
    let traj = sample(field, xi, cond, grid, solver, false)?;
    q_spec.evaluate(traj.final_state())
}

/// Central finite difference of `q` through the sampler:
/// `(q(cond + eps dir) - q(cond - eps dir)) / (2 eps)` at fixed noise.
#[allow(clippy::too_many_arguments)]
pub fn fd_directional(
    field: &dyn VelocityField,
    q_spec: &QuantitySpec,
    cond: &Conditioning,
    xi: &StateVector,
    direction: &Direction,
    eps: f64,
    grid: &TimeGrid,
    solver: Solver,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("fd step must be positive, got {eps}")));
    }
    let plus = cond.add_scaled(eps, &direction.delta_c, &direction.delta_scalars)?;
    let minus = cond.add_scaled(-eps, &direction.delta_c, &direction.delta_scalars)?;
    let qp = q_at(field, q_spec, &plus, xi, grid, solver)?;
    let qm = q_at(field, q_spec, &minus, xi, grid, solver)?;
    Ok((qp - qm) / (2.0 * eps))
}

/// Default step for unit-scale problems.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Default sweep ladder, descending.
pub fn default_eps_ladder() -> Vec<f64> {
    vec![1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6]
}

/// Evaluate the finite difference across a descending eps ladder.
#[allow(clippy::too_many_arguments)]
pub fn fd_sweep(
    field: &dyn VelocityField,
    q_spec: &QuantitySpec,
    cond: &Conditioning,
    xi: &StateVector,
    direction: &Direction,
    eps_ladder: &[f64],
    grid: &TimeGrid,
    solver: Solver,
) -> Result<Vec<(f64, f64)>> {
    if eps_ladder.is_empty() {
        return Err(Error::Config("eps sweep needs at least one step".into()));
    }
    eps_ladder
        .iter()
        .map(|&eps| Ok((eps, fd_directional(field, q_spec, cond, xi, direction, eps, grid, solver)?)))
        .collect()
}

/// Pick the sweep entry where the estimate is most stable: the pair of
/// adjacent eps values whose estimates agree best, favoring the larger eps
/// on ties. Independent of any gradient being verified.
pub fn stable_fd_estimate(sweep: &[(f64, f64)]) -> (f64, f64) {
    if sweep.len() == 1 {
        return sweep[0];
    }
    let mut best = 0usize;
    let mut best_gap = f64::INFINITY;
    for i in 0..sweep.len() - 1 {
        let gap = (sweep[i].1 - sweep[i + 1].1).abs();
        if gap < best_gap {
            best_gap = gap;
            best = i;
        }
    }
    sweep[best]
}

/// Least-squares slope of `log10(y)` against `log10(x)`, for eps-sweep
/// order checks. Non-positive values are skipped.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.log10(), y.log10()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let var = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
    cov / var
}

/// Exact endpoint of the analytic Gaussian flow and its conditioning
/// Jacobian:
///
/// `x0 = M c + (T xi - M c) * s / sqrt(s^2 + T^2)`
/// `dx0/dc = (1 - s / sqrt(s^2 + T^2)) * M`
pub fn gaussian_closed_form(
    mean_map: &Matrix,
    s: f64,
    t_max: f64,
    xi: &StateVector,
    c: &StateVector,
) -> Result<(StateVector, Matrix)> {
    if !(s > 0.0 && t_max > 0.0) {
        return Err(Error::Config("closed form needs s > 0 and T > 0".into()));
    }
    if xi.len() != mean_map.rows() || c.len() != mean_map.cols() {
        return Err(Error::Contract("closed form shape mismatch".into()));
    }
    let shrink = s / (s * s + t_max * t_max).sqrt();
    let mean = mean_map.matvec(c.data());
    let data = xi
        .data()
        .iter()
        .zip(&mean)
        .map(|(xi_i, m_i)| m_i + (t_max * xi_i - m_i) * shrink)
        .collect();
    let x0 = xi.with_data_unchecked(data);
    let jac = mean_map.scaled(1.0 - shrink);
    Ok((x0, jac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::edm_time_grid;
    use crate::noise::gaussian_noise;
    use crate::velocity::AnalyticGaussianField;

    fn sv(v: Vec<f64>) -> StateVector {
        StateVector::from_vec(v).unwrap()
    }

    #[test]
    fn zero_direction_differentiates_to_zero() {
        let field =
            AnalyticGaussianField::new(Matrix::new(2, 1, vec![1.0, 0.5]).unwrap(), 1.0).unwrap();
        let cond = Conditioning::vector_only(sv(vec![0.3]));
        let xi = gaussian_noise(&[2], 1);
        let grid = edm_time_grid(16, 0.002, 80.0, 7.0).unwrap();
        let q = QuantitySpec::Component { index: 0, channel: None };
        let d = Direction::vector_only(StateVector::zeros(&[1]));
        let got = fd_directional(&field, &q, &cond, &xi, &d, 1e-4, &grid, Solver::Heun).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn linear_field_fd_is_eps_independent() {
        let field =
            AnalyticGaussianField::new(Matrix::new(2, 2, vec![1.0, -0.4, 0.3, 0.7]).unwrap(), 1.0)
                .unwrap();
        let cond = Conditioning::vector_only(sv(vec![0.3, -0.6]));
        let xi = gaussian_noise(&[2], 2);
        let grid = edm_time_grid(24, 0.002, 80.0, 7.0).unwrap();
        let q = QuantitySpec::WeightedGlobalMean { lat_weighted: false, channel: None };
        let d = Direction::vector_only(sv(vec![0.8, 0.6]));
        let sweep =
            fd_sweep(&field, &q, &cond, &xi, &d, &[1e-2, 1e-4, 1e-6], &grid, Solver::Heun).unwrap();
        let v0 = sweep[0].1;
        for (_, v) in &sweep {
            assert!((v - v0).abs() <= 1e-8 * v0.abs().max(1.0), "{v} vs {v0}");
        }
    }

    #[test]
    fn fd_is_antisymmetric_in_the_direction() {
        let field =
            AnalyticGaussianField::new(Matrix::new(2, 1, vec![0.9, -0.2]).unwrap(), 0.7).unwrap();
        let cond = Conditioning::vector_only(sv(vec![0.1]));
        let xi = gaussian_noise(&[2], 3);
        let grid = edm_time_grid(12, 0.002, 40.0, 7.0).unwrap();
        let q = QuantitySpec::Component { index: 1, channel: None };
        let d = Direction::vector_only(sv(vec![1.0]));
        let neg = Direction::vector_only(sv(vec![-1.0]));
        let a = fd_directional(&field, &q, &cond, &xi, &d, 1e-5, &grid, Solver::Heun).unwrap();
        let b = fd_directional(&field, &q, &cond, &xi, &neg, 1e-5, &grid, Solver::Heun).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn closed_form_fixed_point_drops_noise_dependence() {
        // T xi = M c makes x0 = M c regardless of the shrink factor
        let m = Matrix::new(2, 1, vec![2.0, -1.0]).unwrap();
        let t_max = 80.0;
        let c = sv(vec![4.0]);
        let mean = m.matvec(c.data());
        let xi = sv(mean.iter().map(|v| v / t_max).collect());
        let (x0, _) = gaussian_closed_form(&m, 1.0, t_max, &xi, &c).unwrap();
        for (got, want) in x0.data().iter().zip(&mean) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_s_to_zero_limit() {
        let m = Matrix::new(1, 1, vec![1.5]).unwrap();
        let (x0, jac) =
            gaussian_closed_form(&m, 1e-12, 80.0, &sv(vec![0.7]), &sv(vec![2.0])).unwrap();
        assert!((x0.data()[0] - 3.0).abs() < 1e-10);
        assert!((jac.get(0, 0) - 1.5).abs() < 1e-10);
    }

    #[test]
    fn closed_form_scalar_value_and_dense_solve_cross_check() {
        // M=1, s=1, T=80, c=2, xi=0 -> x0 = 2 (1 - 1/sqrt(6401))
        let m = Matrix::new(1, 1, vec![1.0]).unwrap();
        let (x0, _) = gaussian_closed_form(&m, 1.0, 80.0, &sv(vec![0.0]), &sv(vec![2.0])).unwrap();
        let want = 2.0 * (1.0 - 1.0 / 6401.0_f64.sqrt());
        assert!((x0.data()[0] - want).abs() < 1e-14);

        // dense 4096-step classical RK4 solve of du/dt = t (x - c) / (1 + t^2),
        // independent of the sampler's Heun path, agrees to 1e-8. The field
        // is regular at t = 0 so the final stage needs no special casing.
        let rhs = |x: f64, t: f64| t * (x - 2.0) / (1.0 + t * t);
        let grid = edm_time_grid(4096, 1e-6, 80.0, 7.0).unwrap();
        let mut x = 0.0;
        for pair in grid.levels().windows(2) {
            let (t0, t1) = (pair[0], pair[1]);
            let h = t1 - t0;
            let k1 = rhs(x, t0);
            let k2 = rhs(x + 0.5 * h * k1, t0 + 0.5 * h);
            let k3 = rhs(x + 0.5 * h * k2, t0 + 0.5 * h);
            let k4 = rhs(x + h * k3, t1);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!(
            (x - x0.data()[0]).abs() < 1e-8,
            "dense solve {x} vs closed form {}",
            x0.data()[0]
        );
    }

    #[test]
    fn closed_form_jacobian_matches_fd_through_sampler() {
        let m = Matrix::new(3, 2, vec![0.6, -0.1, 0.2, 0.9, -0.7, 0.4]).unwrap();
        let field = AnalyticGaussianField::new(m.clone(), 1.0).unwrap();
        let xi = gaussian_noise(&[3], 4);
        let c = sv(vec![0.25, -0.5]);
        let cond = Conditioning::vector_only(c.clone());
        let grid = edm_time_grid(256, 0.002, 80.0, 7.0).unwrap();
        let q = QuantitySpec::Component { index: 1, channel: None };
        let (_, jac) = gaussian_closed_form(&m, 1.0, 80.0, &xi, &c).unwrap();

        for j in 0..2 {
            let mut dir = vec![0.0; 2];
            dir[j] = 1.0;
            let fd = fd_directional(
                &field,
                &q,
                &cond,
                &xi,
                &Direction::vector_only(sv(dir)),
                1e-4,
                &grid,
                Solver::Heun,
            )
            .unwrap();
            let want = jac.get(1, j);
            assert!(
                (fd - want).abs() < 1e-5 * want.abs().max(1.0),
                "component {j}: fd {fd} vs closed form {want}"
            );
        }
    }

    #[test]
    fn stable_estimate_picks_flattest_adjacent_pair() {
        let sweep = vec![(1e-2, 5.0), (1e-3, 4.2), (1e-4, 4.001), (1e-5, 4.0), (1e-6, 3.2)];
        let (eps, v) = stable_fd_estimate(&sweep);
        assert_eq!(eps, 1e-4);
        assert_eq!(v, 4.001);
    }

    #[test]
    fn loglog_slope_recovers_power_law() {
        let xs = [1e-2, 1e-3, 1e-4];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        let slope = loglog_slope(&xs, &ys);
        assert!((slope - 2.0).abs() < 1e-12);
    }
}
