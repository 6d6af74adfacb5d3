//! `flowgrad verify`: drive the oracle suite end to end and report
//! pass/fail per comparison against the documented tolerances. Exit code 0
//! only when every check passes; 4 otherwise.

use std::path::Path;

use serde::Serialize;

use flowgrad_core::adjoint::{adjoint_solve, discrete_adjoint, AdjointOptions};
use flowgrad_core::error::Result;
use flowgrad_core::formats;
use flowgrad_core::noise::{gaussian_noise, seeded_rng, standard_normal_vec};
use flowgrad_core::oracle::{
    fd_sweep, gaussian_closed_form, loglog_slope, stable_fd_estimate, Direction,
};
use flowgrad_core::sampler::sample;
use flowgrad_core::state::{Conditioning, StateVector};
use flowgrad_core::velocity::VelocityField;

use crate::commands::{apply_seed, apply_solver, config_dir, out_dir, Overrides};
use crate::config::{load_config, VerifyConfig};

/// Relative tolerance for the VJP dot-product test against central
/// differences of `eval` (smooth tanh networks and the analytic field).
const DOT_PRODUCT_TOL: f64 = 1e-8;
/// Relative tolerance for discrete-adjoint directional gradients against
/// the stable-eps central difference of the recorded sampler.
const DISCRETE_VS_FD_TOL: f64 = 1e-6;
/// Relative gap between the stored-mode continuous adjoint and the
/// discrete adjoint. The gap is O(h^2) with Heun, so this bound assumes
/// a grid of 64+ steps.
const CONT_VS_DISC_TOL: f64 = 1e-3;
/// Relative error of the continuous adjoint against the closed-form
/// gradient of the analytic field at 128 Heun steps.
const CLOSED_FORM_TOL: f64 = 1e-3;
/// Acceptable log-log slope band for the central-difference eps sweep.
const SWEEP_SLOPE_BOUNDS: (f64, f64) = (1.5, 2.5);

#[derive(Serialize, Clone)]
struct CheckLine {
    name: String,
    max_rel_err: f64,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct SweepReport {
    eps: Vec<f64>,
    errors: Vec<f64>,
    slope: f64,
    bounds: (f64, f64),
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    checks: Vec<CheckLine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_sweep: Option<SweepReport>,
    pass: bool,
    config: &'a VerifyConfig,
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

fn random_conditioning(
    field: &dyn VelocityField,
    rng: &mut flowgrad_core::noise::ChaCha12Rng,
) -> Result<Conditioning> {
    let desc = field.descriptor();
    let c = StateVector::zeros(&desc.cond_shape).with_data(
        standard_normal_vec(rng, desc.cond_shape.iter().product())
            .iter()
            .map(|v| 0.4 * v)
            .collect(),
    )?;
    let scalars = (0..desc.n_scalars.unwrap_or(0))
        .map(|k| (format!("s{k}"), 100.0 + 10.0 * k as f64))
        .collect();
    Conditioning::new(c, scalars)
}

/// Dot-product test: `<a, du> = <vjp_state(a), dx> + <vjp_cond(a), (dc, ds)>`
/// against central differences of `eval` in a joint direction.
fn dot_product_check(
    field: &dyn VelocityField,
    n_directions: usize,
    seed: u64,
) -> Result<CheckLine> {
    let desc = field.descriptor();
    let state_len: usize = desc.state_shape.iter().product();
    let cond_len: usize = desc.cond_shape.iter().product();
    let mut rng = seeded_rng(seed.wrapping_add(101));
    let mut worst = 0.0_f64;
    for i in 0..n_directions {
        let cond = random_conditioning(field, &mut rng)?;
        let x = StateVector::zeros(&desc.state_shape)
            .with_data(standard_normal_vec(&mut rng, state_len))?;
        let a = StateVector::zeros(&desc.state_shape)
            .with_data(standard_normal_vec(&mut rng, state_len))?;
        let t = [0.1, 0.5, 2.0][i % 3];
        let (vs, vc) = field.vjp_all(&a, &x, t, &cond)?;

        let dx = StateVector::zeros(&desc.state_shape)
            .with_data(standard_normal_vec(&mut rng, state_len))?;
        let dc = StateVector::zeros(&desc.cond_shape)
            .with_data(standard_normal_vec(&mut rng, cond_len))?;
        let ds: Vec<(String, f64)> = cond
            .scalars()
            .iter()
            .map(|(n, _)| (n.clone(), standard_normal_vec(&mut rng, 1)[0] * 20.0))
            .collect();

        let eps = 1e-5;
        let probe = |sign: f64| -> Result<StateVector> {
            let cp = cond.add_scaled(sign * eps, &dc, &ds)?;
            field.eval(&x.add_scaled(sign * eps, &dx), t, &cp)
        };
        let du = probe(1.0)?.sub(&probe(-1.0)?).scaled(1.0 / (2.0 * eps));
        let lhs = a.dot(&du);
        let rhs = vs.dot(&dx)
            + vc.c.dot(&dc)
            + vc.scalars.iter().zip(&ds).map(|(g, (_, d))| g * d).sum::<f64>();
        worst = worst.max(rel_err(lhs, rhs));
    }
    Ok(CheckLine {
        name: "vjp_dot_product".into(),
        max_rel_err: worst,
        tolerance: DOT_PRODUCT_TOL,
        pass: worst <= DOT_PRODUCT_TOL,
    })
}

pub fn run(config_path: &Path, overrides: &Overrides) -> Result<i32> {
    let config: VerifyConfig = load_config(config_path)?;
    let dir = out_dir(overrides, config.out_dir.as_ref())?;

    let field = config.field.resolve(&config_dir(config_path))?;
    let grid = config.grid.build(overrides.steps)?;
    let solver = apply_solver(config.solver, overrides);
    let seed = apply_seed(config.seed, overrides);
    let dyn_field = field.as_dyn();
    let desc = dyn_field.descriptor();

    let mut checks = Vec::new();
    checks.push(dot_product_check(dyn_field, config.n_directions, seed)?);

    // one fixed-noise trajectory shared by the gradient comparisons
    let mut rng = seeded_rng(seed.wrapping_add(202));
    let cond = random_conditioning(dyn_field, &mut rng)?;
    let xi = gaussian_noise(&desc.state_shape, seed);
    let traj = sample(dyn_field, &xi, &cond, &grid, solver, true)?;
    let g = config.quantity.gradient(traj.final_state())?;
    let disc = discrete_adjoint(dyn_field, &traj, &g)?;

    // discrete adjoint vs stable-eps central differences
    let cond_len: usize = desc.cond_shape.iter().product();
    let mut worst_fd = 0.0_f64;
    for _ in 0..config.n_directions {
        let dc = StateVector::zeros(&desc.cond_shape)
            .with_data(standard_normal_vec(&mut rng, cond_len))?;
        let ds: Vec<(String, f64)> = cond
            .scalars()
            .iter()
            .map(|(n, _)| (n.clone(), standard_normal_vec(&mut rng, 1)[0] * 5.0))
            .collect();
        let lin = disc.dq_dc.dot(&dc)
            + disc
                .dq_dscalar
                .iter()
                .zip(&ds)
                .map(|((_, g), (_, d))| g * d)
                .sum::<f64>();
        let dir_ = Direction { delta_c: dc, delta_scalars: ds };
        let sweep = fd_sweep(
            dyn_field,
            &config.quantity,
            &cond,
            &xi,
            &dir_,
            &flowgrad_core::oracle::default_eps_ladder(),
            &grid,
            solver,
        )?;
        let (_, fd) = stable_fd_estimate(&sweep);
        worst_fd = worst_fd.max(rel_err(fd, lin));
    }
    checks.push(CheckLine {
        name: "discrete_vs_fd".into(),
        max_rel_err: worst_fd,
        tolerance: DISCRETE_VS_FD_TOL,
        pass: worst_fd <= DISCRETE_VS_FD_TOL,
    });

    // stored-mode continuous adjoint vs the discrete reference
    let cont = adjoint_solve(dyn_field, &traj, &g, &AdjointOptions::default())?;
    let gap = cont.dq_dc.sub(&disc.dq_dc).norm_l2() / disc.dq_dc.norm_l2().max(1e-12);
    checks.push(CheckLine {
        name: "continuous_vs_discrete".into(),
        max_rel_err: gap,
        tolerance: CONT_VS_DISC_TOL,
        pass: gap <= CONT_VS_DISC_TOL,
    });

    // closed-form comparison, when the field has one
    if let Some(analytic) = field.analytic() {
        let shrink = analytic.noise_std()
            / (analytic.noise_std() * analytic.noise_std() + grid.sigma_max() * grid.sigma_max())
                .sqrt();
        let jac = analytic.mean_map().scaled(1.0 - shrink);
        let want = StateVector::zeros(&desc.cond_shape).with_data(jac.vecmat(g.data()))?;
        let err = cont.dq_dc.sub(&want).norm_l2() / want.norm_l2().max(1e-12);
        // cross-check the jacobian path itself against the endpoint map
        let (x0, _) = gaussian_closed_form(
            analytic.mean_map(),
            analytic.noise_std(),
            grid.sigma_max(),
            &xi,
            cond.c(),
        )?;
        let endpoint_err =
            traj.final_state().sub(&x0).norm_l2() / x0.norm_l2().max(1e-12);
        checks.push(CheckLine {
            name: "closed_form_gradient".into(),
            max_rel_err: err,
            tolerance: CLOSED_FORM_TOL,
            pass: err <= CLOSED_FORM_TOL,
        });
        checks.push(CheckLine {
            name: "closed_form_endpoint".into(),
            max_rel_err: endpoint_err,
            tolerance: CLOSED_FORM_TOL,
            pass: endpoint_err <= CLOSED_FORM_TOL,
        });
    }

    // eps sweep: central-difference error against the discrete adjoint
    // shows second order before the rounding floor (informative only for
    // nonlinear fields; linear ones sit at the floor immediately)
    let eps_sweep = if config.eps_sweep && field.analytic().is_none() {
        let dc = StateVector::zeros(&desc.cond_shape)
            .with_data(standard_normal_vec(&mut rng, cond_len))?;
        let ds: Vec<(String, f64)> = cond
            .scalars()
            .iter()
            .map(|(n, _)| (n.clone(), standard_normal_vec(&mut rng, 1)[0] * 5.0))
            .collect();
        let exact = disc.dq_dc.dot(&dc)
            + disc
                .dq_dscalar
                .iter()
                .zip(&ds)
                .map(|((_, g), (_, d))| g * d)
                .sum::<f64>();
        let dir_ = Direction { delta_c: dc, delta_scalars: ds };
        let ladder = vec![3e-2, 1e-2, 3e-3, 1e-3];
        let sweep =
            fd_sweep(dyn_field, &config.quantity, &cond, &xi, &dir_, &ladder, &grid, solver)?;
        let errors: Vec<f64> = sweep.iter().map(|(_, fd)| (fd - exact).abs()).collect();
        let slope = loglog_slope(&ladder, &errors);
        let pass = slope >= SWEEP_SLOPE_BOUNDS.0 && slope <= SWEEP_SLOPE_BOUNDS.1;
        Some(SweepReport { eps: ladder, errors, slope, bounds: SWEEP_SLOPE_BOUNDS, pass })
    } else {
        None
    };

    let all_pass =
        checks.iter().all(|c| c.pass) && eps_sweep.as_ref().map(|s| s.pass).unwrap_or(true);
    let report = VerifyReport { checks: checks.clone(), eps_sweep, pass: all_pass, config: &config };
    formats::write_json(&dir.join("verify_report.json"), &report)?;

    for c in &checks {
        println!(
            "{}: max rel err {:.3e} (tol {:.1e}) -> {}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    if let Some(s) = &report.eps_sweep {
        println!(
            "eps_sweep: slope {:.3} in [{}, {}] -> {}",
            s.slope,
            s.bounds.0,
            s.bounds.1,
            if s.pass { "pass" } else { "FAIL" }
        );
    }

    Ok(if all_pass { 0 } else { 4 })
}
