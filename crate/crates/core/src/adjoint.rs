//! Adjoint-state gradient extraction.
//!
//! Two routes to `dq/dc` are provided and kept deliberately independent:
//!
//! - [`adjoint_solve`]: integrates the augmented continuous system
//!   `d/dt [X, a, w, v] = [u, -a du/dX, -a du/dc, -a du/dtau_k]` from
//!   `t = 0` up to `t = T`, starting from `[X_0, dq/dX_0, 0, 0]`. The
//!   terminal accumulators are the gradients: `w_T = dq/dc` and
//!   `v_T[k] = dq/ds_k`. In stored mode `X` is read back from the recorded
//!   trajectory level by level; in recompute mode it is re-integrated
//!   forward in `t` alongside the adjoint (memory O(1), but only for fields
//!   regular at `t = 0`).
//! - [`discrete_adjoint`]: exact reverse-mode differentiation of the
//!   recorded solver map itself, chaining VJPs through every Euler/Heun
//!   stage in reverse. This is the reference gradient: finite-difference
//!   checks against it are floored only by the FD error.
//!
//! The adjoint integration reuses the sampler's step rule (Euler with
//! Euler, Heun with Heun) on the reversed grid. The first ascending step
//! starts at the singular `t = 0` end, so it is a single Euler update with
//! the right-hand side evaluated at the first positive level — mirroring
//! the sampler's Euler-only final step, which makes that interval's
//! contribution identical between the continuous and discrete routes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::gaussian_noise;
use crate::quantity::QuantitySpec;
use crate::sampler::{sample, Solver, Trajectory};
use crate::state::{Conditioning, StateVector};
use crate::velocity::VelocityField;

/// Continuous-adjoint state variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjointMode {
    /// Read `X` at each level from the stored trajectory (default; works
    /// with the singular EDM wrapper).
    Stored,
    /// Re-integrate `X` forward in `t` alongside the adjoint. Requires a
    /// field regular at `t = 0`.
    Recompute,
}

/// Gradient route selector, as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Stored,
    Recompute,
    Discrete,
}

impl std::fmt::Display for GradientMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradientMode::Stored => write!(f, "stored"),
            GradientMode::Recompute => write!(f, "recompute"),
            GradientMode::Discrete => write!(f, "discrete"),
        }
    }
}

impl std::str::FromStr for GradientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stored" => Ok(GradientMode::Stored),
            "recompute" => Ok(GradientMode::Recompute),
            "discrete" => Ok(GradientMode::Discrete),
            other => Err(Error::Config(format!("unknown gradient mode '{other}'"))),
        }
    }
}

/// The augmented state bundle `(X, a, w, v)` integrated by the adjoint
/// system: sample state, adjoint, vector-conditioning accumulator, and one
/// scalar accumulator per scalar conditioner.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub x: StateVector,
    pub a: StateVector,
    pub w: StateVector,
    pub v: Vec<f64>,
}

impl AdjointState {
    pub fn new(x: StateVector, a: StateVector, w: StateVector, v: Vec<f64>) -> Result<Self> {
        if !a.same_shape(&x) {
            return Err(Error::Contract("adjoint shape does not match state shape".into()));
        }
        Ok(AdjointState { x, a, w, v })
    }
}

/// Run provenance attached to every sensitivity result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub field: String,
    pub solver: Solver,
    pub mode: String,
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantity: Option<String>,
}

impl RunMetadata {
    fn for_run(field: &dyn VelocityField, traj: &Trajectory, solver: Solver, mode: &str) -> Self {
        RunMetadata {
            field: field.descriptor().name,
            solver,
            mode: mode.to_string(),
            n_steps: traj.grid().n_steps(),
            sigma_min: traj.grid().sigma_min(),
            sigma_max: traj.grid().sigma_max(),
            rho: traj.grid().rho(),
            seed: None,
            quantity: None,
        }
    }
}

/// Gradients of a scalar quantity with respect to the conditioning inputs.
#[derive(Debug, Clone)]
pub struct SensitivityResult {
    /// `dq/dc`, shaped like the vector conditioner.
    pub dq_dc: StateVector,
    /// `dq/ds_k` per scalar conditioner, in conditioning order.
    pub dq_dscalar: Vec<(String, f64)>,
    /// `dq/dX_T`: sensitivity to the scaled-noise initial state.
    pub dq_dx_t: StateVector,
    pub metadata: RunMetadata,
}

/// Options for [`adjoint_solve`].
#[derive(Debug, Clone)]
pub struct AdjointOptions {
    pub mode: AdjointMode,
    /// Step rule for the adjoint integration; `None` reuses the
    /// trajectory's sampler rule.
    pub solver: Option<Solver>,
    /// Whether to integrate the per-scalar accumulators `v`. Turning this
    /// off must not change `w` in any bit; the suite asserts it.
    pub track_scalars: bool,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        AdjointOptions { mode: AdjointMode::Stored, solver: None, track_scalars: true }
    }
}

/// Right-hand side of the `(a, w, v)` block: `(-a du/dX, -a du/dc, -a du/ds)`.
struct AdjointRhs {
    a: StateVector,
    w: StateVector,
    v: Vec<f64>,
}

fn adjoint_rhs(
    field: &dyn VelocityField,
    a: &StateVector,
    x: &StateVector,
    t: f64,
    cond: &Conditioning,
) -> Result<AdjointRhs> {
    let (va, vc) = field.vjp_all(a, x, t, cond)?;
    Ok(AdjointRhs {
        a: va.scaled(-1.0),
        w: vc.c.scaled(-1.0),
        v: vc.scalars.iter().map(|v| -v).collect(),
    })
}

fn add_scaled_v(v: &mut [f64], scale: f64, rhs: &[f64]) {
    for (o, r) in v.iter_mut().zip(rhs) {
        *o += scale * r;
    }
}

/// Integrate the augmented adjoint system from `t = 0` to `t = T` and
/// return the terminal accumulators as gradients.
pub fn adjoint_solve(
    field: &dyn VelocityField,
    traj: &Trajectory,
    dq_dx0: &StateVector,
    options: &AdjointOptions,
) -> Result<SensitivityResult> {
    let desc = field.descriptor();
    if dq_dx0.shape() != desc.state_shape.as_slice() {
        return Err(Error::Contract("dq_dx0 shape does not match field state shape".into()));
    }
    if options.mode == AdjointMode::Recompute && !desc.regular_at_zero {
        return Err(Error::Config(format!(
            "recompute mode requires a field regular at t = 0; '{}' is singular there",
            desc.name
        )));
    }
    let solver = options.solver.unwrap_or(traj.solver());
    let cond = traj.conditioning();
    let levels = traj.grid().levels();
    let n = levels.len() - 1;

    let mut a = dq_dx0.clone();
    let mut w = StateVector::zeros_like(cond.c());
    let mut v = vec![0.0; cond.n_scalars()];

    match options.mode {
        AdjointMode::Stored => {
            let states = traj.states().ok_or_else(|| {
                Error::Config("stored adjoint mode requires a trajectory sampled with store".into())
            })?;
            // ascending times s_k = levels[n - k], states aligned the same way
            for k in 0..n {
                let (s0, s1) = (levels[n - k], levels[n - k - 1]);
                let ds = s1 - s0;
                let (x0, x1) = (&states[n - k], &states[n - k - 1]);
                if s0 == 0.0 || solver == Solver::Euler {
                    // At the singular end the RHS is taken at the first
                    // positive level, exactly as the sampler's final step.
                    let (xs, ts) = if s0 == 0.0 { (x1, s1) } else { (x0, s0) };
                    let rhs = adjoint_rhs(field, &a, xs, ts, cond)?;
                    a = a.add_scaled(ds, &rhs.a);
                    w = w.add_scaled(ds, &rhs.w);
                    if options.track_scalars {
                        add_scaled_v(&mut v, ds, &rhs.v);
                    }
                } else {
                    let k1 = adjoint_rhs(field, &a, x0, s0, cond)?;
                    let ae = a.add_scaled(ds, &k1.a);
                    let k2 = adjoint_rhs(field, &ae, x1, s1, cond)?;
                    a = a.add_scaled(ds / 2.0, &k1.a).add_scaled(ds / 2.0, &k2.a);
                    w = w.add_scaled(ds / 2.0, &k1.w).add_scaled(ds / 2.0, &k2.w);
                    if options.track_scalars {
                        add_scaled_v(&mut v, ds / 2.0, &k1.v);
                        add_scaled_v(&mut v, ds / 2.0, &k2.v);
                    }
                }
                if !(a.all_finite() && w.all_finite()) {
                    return Err(Error::Divergence {
                        step: k,
                        detail: "non-finite adjoint state".into(),
                    });
                }
            }
        }
        AdjointMode::Recompute => {
            let mut x = traj.final_state().clone();
            for k in 0..n {
                let (s0, s1) = (levels[n - k], levels[n - k - 1]);
                let ds = s1 - s0;
                if solver == Solver::Euler {
                    let u = field.eval(&x, s0, cond)?;
                    let rhs = adjoint_rhs(field, &a, &x, s0, cond)?;
                    x = x.add_scaled(ds, &u);
                    a = a.add_scaled(ds, &rhs.a);
                    w = w.add_scaled(ds, &rhs.w);
                    if options.track_scalars {
                        add_scaled_v(&mut v, ds, &rhs.v);
                    }
                } else {
                    let u1 = field.eval(&x, s0, cond)?;
                    let k1 = adjoint_rhs(field, &a, &x, s0, cond)?;
                    let xe = x.add_scaled(ds, &u1);
                    let ae = a.add_scaled(ds, &k1.a);
                    let u2 = field.eval(&xe, s1, cond)?;
                    let k2 = adjoint_rhs(field, &ae, &xe, s1, cond)?;
                    x = x.add_scaled(ds / 2.0, &u1).add_scaled(ds / 2.0, &u2);
                    a = a.add_scaled(ds / 2.0, &k1.a).add_scaled(ds / 2.0, &k2.a);
                    w = w.add_scaled(ds / 2.0, &k1.w).add_scaled(ds / 2.0, &k2.w);
                    if options.track_scalars {
                        add_scaled_v(&mut v, ds / 2.0, &k1.v);
                        add_scaled_v(&mut v, ds / 2.0, &k2.v);
                    }
                }
                if !(x.all_finite() && a.all_finite() && w.all_finite()) {
                    return Err(Error::Divergence {
                        step: k,
                        detail: "non-finite adjoint state".into(),
                    });
                }
            }
        }
    }

    let mode_label = match options.mode {
        AdjointMode::Stored => "stored",
        AdjointMode::Recompute => "recompute",
    };
    let dq_dscalar = cond
        .scalars()
        .iter()
        .zip(&v)
        .map(|((name, _), grad)| (name.clone(), *grad))
        .collect();
    Ok(SensitivityResult {
        dq_dc: w,
        dq_dscalar,
        dq_dx_t: a,
        metadata: RunMetadata::for_run(field, traj, solver, mode_label),
    })
}

/// Exact reverse-mode gradient of the recorded discrete sampler map
/// `(X_T, c, scalars) -> q(X_0)`, chaining VJPs through every recorded
/// Euler/Heun step (both Heun stages included) in reverse.
pub fn discrete_adjoint(
    field: &dyn VelocityField,
    traj: &Trajectory,
    dq_dx0: &StateVector,
) -> Result<SensitivityResult> {
    let desc = field.descriptor();
    if dq_dx0.shape() != desc.state_shape.as_slice() {
        return Err(Error::Contract("dq_dx0 shape does not match field state shape".into()));
    }
    let states = traj
        .states()
        .ok_or_else(|| Error::Contract("discrete adjoint requires stored trajectory states".into()))?;
    let cond = traj.conditioning();
    let levels = traj.grid().levels();
    let n = levels.len() - 1;
    let solver = traj.solver();

    let mut a = dq_dx0.clone();
    let mut w = StateVector::zeros_like(cond.c());
    let mut v = vec![0.0; cond.n_scalars()];

    for i in (0..n).rev() {
        let (t0, t1) = (levels[i], levels[i + 1]);
        let h = t1 - t0;
        let x = &states[i];
        if solver == Solver::Euler || t1 == 0.0 {
            // forward: x' = x + h u(x, t0)
            let (va, vc) = field.vjp_all(&a, x, t0, cond)?;
            w = w.add_scaled(h, &vc.c);
            add_scaled_v(&mut v, h, &vc.scalars);
            a = a.add_scaled(h, &va);
        } else {
            // forward: xe = x + h d1; x' = x + h/2 (d1 + d2(xe, t1));
            // reverse in the same linearization points.
            let d1 = field.eval(x, t0, cond)?;
            let xe = x.add_scaled(h, &d1);
            let b = a;
            let (xe_bar, vc1) = field.vjp_all(&b.scaled(h / 2.0), &xe, t1, cond)?;
            w = w.add_scaled(1.0, &vc1.c);
            add_scaled_v(&mut v, 1.0, &vc1.scalars);
            let d1_bar = b.scaled(h / 2.0).add_scaled(h, &xe_bar);
            let (va0, vc0) = field.vjp_all(&d1_bar, x, t0, cond)?;
            w = w.add_scaled(1.0, &vc0.c);
            add_scaled_v(&mut v, 1.0, &vc0.scalars);
            a = b.add_scaled(1.0, &xe_bar).add_scaled(1.0, &va0);
        }
        if !(a.all_finite() && w.all_finite()) {
            return Err(Error::Divergence { step: i, detail: "non-finite adjoint state".into() });
        }
    }

    let dq_dscalar = cond
        .scalars()
        .iter()
        .zip(&v)
        .map(|((name, _), grad)| (name.clone(), *grad))
        .collect();
    Ok(SensitivityResult {
        dq_dc: w,
        dq_dscalar,
        dq_dx_t: a,
        metadata: RunMetadata::for_run(field, traj, solver, "discrete"),
    })
}

/// Dispatch on the gradient route. Stored and discrete routes need a
/// stored trajectory; recompute does not.
pub fn compute_sensitivity(
    field: &dyn VelocityField,
    traj: &Trajectory,
    dq_dx0: &StateVector,
    mode: GradientMode,
) -> Result<SensitivityResult> {
    match mode {
        GradientMode::Discrete => discrete_adjoint(field, traj, dq_dx0),
        GradientMode::Stored => adjoint_solve(
            field,
            traj,
            dq_dx0,
            &AdjointOptions { mode: AdjointMode::Stored, ..Default::default() },
        ),
        GradientMode::Recompute => adjoint_solve(
            field,
            traj,
            dq_dx0,
            &AdjointOptions { mode: AdjointMode::Recompute, ..Default::default() },
        ),
    }
}

/// Noise policy for batch runs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedPolicy {
    /// One fixed noise sample for every conditioning.
    Fixed { seed: u64 },
    /// Fresh noise per sample, seeded `base_seed + index`.
    PerSample { base_seed: u64 },
}

impl SeedPolicy {
    fn seed_for(&self, index: usize) -> u64 {
        match self {
            SeedPolicy::Fixed { seed } => *seed,
            SeedPolicy::PerSample { base_seed } => base_seed.wrapping_add(index as u64),
        }
    }
}

/// One batch entry: either a gradient result or the failure message.
#[derive(Debug)]
pub struct SampleOutcome {
    pub index: usize,
    pub seed: u64,
    pub outcome: std::result::Result<SensitivityResult, String>,
}

/// Per-group mean map.
#[derive(Debug, Clone)]
pub struct GroupMean {
    pub key: usize,
    pub count: usize,
    pub dq_dc: StateVector,
}

/// Batch output: the overall mean map (failed samples excluded, never
/// imputed), all per-sample outcomes, and optional grouped means.
#[derive(Debug)]
pub struct BatchResult {
    pub mean_dq_dc: StateVector,
    pub mean_dq_dscalar: Vec<(String, f64)>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub per_sample: Vec<SampleOutcome>,
    pub group_means: Option<Vec<GroupMean>>,
}

/// Run sample + adjoint per conditioning and average the sensitivity maps.
///
/// Samples may run on the rayon pool; the reduction is performed in index
/// order afterwards, so results are bit-identical for any worker count.
#[allow(clippy::too_many_arguments)]
pub fn batch_sensitivity(
    field: &(dyn VelocityField + Sync),
    conds: &[Conditioning],
    q_spec: &QuantitySpec,
    seeds: SeedPolicy,
    grid: &TimeGrid,
    solver: Solver,
    mode: GradientMode,
    groups: Option<&[usize]>,
) -> Result<BatchResult> {
    if conds.is_empty() {
        return Err(Error::Contract("batch needs a non-empty conditioning list".into()));
    }
    if let Some(g) = groups {
        if g.len() != conds.len() {
            return Err(Error::Contract("grouping keys must match conditioning count".into()));
        }
    }
    let state_shape = field.descriptor().state_shape;
    let store = mode != GradientMode::Recompute;

    let per_sample: Vec<SampleOutcome> = conds
        .par_iter()
        .enumerate()
        .map(|(index, cond)| {
            let seed = seeds.seed_for(index);
            let run = || -> Result<SensitivityResult> {
                let xi = gaussian_noise(&state_shape, seed);
                let traj = sample(field, &xi, cond, grid, solver, store)?;
                let g = q_spec.gradient(traj.final_state())?;
                let mut result = compute_sensitivity(field, &traj, &g, mode)?;
                result.metadata.seed = Some(seed);
                result.metadata.quantity = Some(q_spec.label());
                Ok(result)
            };
            SampleOutcome { index, seed, outcome: run().map_err(|e| e.to_string()) }
        })
        .collect();

    // fixed-order reduction
    let mut sum_dc: Option<StateVector> = None;
    let mut sum_scalars: Vec<(String, f64)> = Vec::new();
    let mut group_acc: std::collections::BTreeMap<usize, (StateVector, usize)> =
        std::collections::BTreeMap::new();
    let mut n_ok = 0usize;
    for s in &per_sample {
        let Ok(result) = &s.outcome else { continue };
        n_ok += 1;
        sum_dc = Some(match sum_dc {
            None => result.dq_dc.clone(),
            Some(acc) => acc.add_scaled(1.0, &result.dq_dc),
        });
        if sum_scalars.is_empty() {
            sum_scalars = result.dq_dscalar.clone();
        } else {
            for ((_, acc), (_, v)) in sum_scalars.iter_mut().zip(&result.dq_dscalar) {
                *acc += v;
            }
        }
        if let Some(g) = groups {
            let key = g[s.index];
            match group_acc.get_mut(&key) {
                Some((acc, count)) => {
                    *acc = acc.add_scaled(1.0, &result.dq_dc);
                    *count += 1;
                }
                None => {
                    group_acc.insert(key, (result.dq_dc.clone(), 1));
                }
            }
        }
    }

    let n_failed = per_sample.len() - n_ok;
    let Some(sum_dc) = sum_dc else {
        return Err(Error::BatchFailure(format!("all {} samples failed", per_sample.len())));
    };
    let inv = 1.0 / n_ok as f64;
    let mean_dq_dc = sum_dc.scaled(inv);
    let mean_dq_dscalar =
        sum_scalars.into_iter().map(|(name, v)| (name, v * inv)).collect();
    let group_means = groups.map(|_| {
        group_acc
            .into_iter()
            .map(|(key, (acc, count))| GroupMean {
                key,
                count,
                dq_dc: acc.scaled(1.0 / count as f64),
            })
            .collect()
    });

    Ok(BatchResult { mean_dq_dc, mean_dq_dscalar, n_ok, n_failed, per_sample, group_means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::edm_time_grid;
    use crate::state::Matrix;
    use crate::velocity::{AnalyticGaussianField, CondVjp, FieldDescriptor};

    /// u = -x, no conditioning dependence.
    struct DecayField {
        dim: usize,
    }

    impl VelocityField for DecayField {
        fn descriptor(&self) -> FieldDescriptor {
            FieldDescriptor {
                name: "decay".into(),
                state_shape: vec![self.dim],
                cond_shape: vec![1],
                n_scalars: None,
                regular_at_zero: true,
            }
        }
        fn eval(&self, x: &StateVector, _t: f64, _c: &Conditioning) -> Result<StateVector> {
            Ok(x.scaled(-1.0))
        }
        fn vjp_state(
            &self,
            a: &StateVector,
            _x: &StateVector,
            _t: f64,
            _c: &Conditioning,
        ) -> Result<StateVector> {
            Ok(a.scaled(-1.0))
        }
        fn vjp_cond(
            &self,
            _a: &StateVector,
            _x: &StateVector,
            _t: f64,
            cond: &Conditioning,
        ) -> Result<CondVjp> {
            Ok(CondVjp {
                c: StateVector::zeros_like(cond.c()),
                scalars: vec![0.0; cond.n_scalars()],
            })
        }
    }

    fn analytic_field() -> (AnalyticGaussianField, Matrix) {
        let m = Matrix::new(3, 2, vec![0.4, -0.7, 1.1, 0.2, -0.3, 0.9]).unwrap();
        (AnalyticGaussianField::new(m.clone(), 1.0).unwrap(), m)
    }

    fn run_trajectory(
        field: &dyn VelocityField,
        c: Vec<f64>,
        scalars: Vec<(String, f64)>,
        n_steps: usize,
    ) -> Trajectory {
        let cond = Conditioning::new(StateVector::from_vec(c).unwrap(), scalars).unwrap();
        let xi = gaussian_noise(&field.descriptor().state_shape, 11);
        let grid = edm_time_grid(n_steps, 0.002, 80.0, 7.0).unwrap();
        sample(field, &xi, &cond, &grid, Solver::Heun, true).unwrap()
    }

    #[test]
    fn no_conditioning_dependence_gives_exactly_zero_map() {
        let field = DecayField { dim: 3 };
        let traj = run_trajectory(&field, vec![0.5], vec![("tau".into(), 3.0)], 24);
        let g = StateVector::from_vec(vec![1.0, -2.0, 0.5]).unwrap();
        for mode in [GradientMode::Stored, GradientMode::Discrete, GradientMode::Recompute] {
            let r = compute_sensitivity(&field, &traj, &g, mode).unwrap();
            assert_eq!(r.dq_dc.data(), &[0.0], "{mode}");
            assert_eq!(r.dq_dscalar[0].1, 0.0, "{mode}");
        }
    }

    #[test]
    fn zero_seed_gradient_gives_all_zero_output() {
        let (field, _) = analytic_field();
        let traj = run_trajectory(&field, vec![0.3, -0.2], vec![], 24);
        let g = StateVector::zeros(&[3]);
        let r = discrete_adjoint(&field, &traj, &g).unwrap();
        assert!(r.dq_dc.norm_inf() == 0.0);
        assert!(r.dq_dx_t.norm_inf() == 0.0);
    }

    #[test]
    fn stored_adjoint_matches_closed_form_on_analytic_field() {
        let (field, m) = analytic_field();
        let traj = run_trajectory(&field, vec![0.3, -0.2], vec![], 128);
        let g = StateVector::from_vec(vec![0.7, -0.4, 1.3]).unwrap();
        let r = adjoint_solve(&field, &traj, &g, &AdjointOptions::default()).unwrap();

        let t_max = 80.0;
        let factor = 1.0 - 1.0 / (1.0_f64 + t_max * t_max).sqrt();
        let want: Vec<f64> = m.vecmat(g.data()).iter().map(|v| v * factor).collect();
        let err = r
            .dq_dc
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        let scale = want.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        assert!(err / scale < 1e-3, "rel err {}", err / scale);
    }

    #[test]
    fn continuous_and_discrete_coincide_on_linear_fields() {
        // For velocities linear in x, Heun-of-the-adjoint is algebraically
        // the exact transpose of Heun-of-the-state, so the two routes agree
        // to rounding.
        let (field, _) = analytic_field();
        let traj = run_trajectory(&field, vec![0.3, -0.2], vec![], 64);
        let g = StateVector::from_vec(vec![1.0, 0.5, -0.25]).unwrap();
        let cont = adjoint_solve(&field, &traj, &g, &AdjointOptions::default()).unwrap();
        let disc = discrete_adjoint(&field, &traj, &g).unwrap();
        let gap = cont.dq_dc.sub(&disc.dq_dc).norm_inf();
        assert!(gap < 1e-13 * disc.dq_dc.norm_inf().max(1.0), "gap {gap}");
    }

    #[test]
    fn discrete_adjoint_reproduces_euler_factor_product() {
        let field = DecayField { dim: 1 };
        let cond = Conditioning::vector_only(StateVector::from_vec(vec![0.0]).unwrap());
        let xi = StateVector::from_vec(vec![0.01]).unwrap();
        let grid = edm_time_grid(12, 0.002, 2.0, 7.0).unwrap();
        let traj = sample(&field, &xi, &cond, &grid, Solver::Euler, true).unwrap();

        let g = StateVector::from_vec(vec![1.0]).unwrap();
        let r = discrete_adjoint(&field, &traj, &g).unwrap();

        // hand-computed product of per-step Euler factors (1 - dt_i) over
        // the recorded grid, with dt_i = t_{i+1} - t_i; agreement is exact
        // up to the rounding of the 12-step product itself
        let mut product = 1.0;
        for pair in grid.levels().windows(2) {
            product *= 1.0 - (pair[1] - pair[0]);
        }
        let got = r.dq_dx_t.data()[0];
        assert!(
            (got - product).abs() <= 1e-14 * product.abs(),
            "got {got}, product {product}"
        );
    }

    #[test]
    fn discrete_adjoint_is_bit_exact_under_power_of_two_scaling() {
        let (field, _) = analytic_field();
        let traj = run_trajectory(&field, vec![0.3, -0.2], vec![("tau".into(), 5.0)], 32);
        let g = StateVector::from_vec(vec![0.9, -1.7, 0.33]).unwrap();
        let r1 = discrete_adjoint(&field, &traj, &g).unwrap();
        let r2 = discrete_adjoint(&field, &traj, &g.scaled(4.0)).unwrap();
        assert_eq!(r2.dq_dc, r1.dq_dc.scaled(4.0));
        assert_eq!(r2.dq_dx_t, r1.dq_dx_t.scaled(4.0));
        assert_eq!(r2.dq_dscalar[0].1, 4.0 * r1.dq_dscalar[0].1);
    }

    #[test]
    fn recompute_mode_rejects_singular_fields() {
        use crate::velocity::{EdmFlowField, IdentityDenoiser};
        let field = EdmFlowField::new(IdentityDenoiser { state_dim: 2, cond_dim: 1, n_scalars: 0 });
        let cond = Conditioning::vector_only(StateVector::from_vec(vec![0.0]).unwrap());
        let xi = gaussian_noise(&[2], 3);
        let grid = edm_time_grid(8, 0.002, 80.0, 7.0).unwrap();
        let traj = sample(&field, &xi, &cond, &grid, Solver::Heun, true).unwrap();
        let g = StateVector::from_vec(vec![1.0, 0.0]).unwrap();
        let r = adjoint_solve(
            &field,
            &traj,
            &g,
            &AdjointOptions { mode: AdjointMode::Recompute, ..Default::default() },
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn recompute_mode_matches_stored_on_regular_fields() {
        let (field, _) = analytic_field();
        let traj = run_trajectory(&field, vec![0.3, -0.2], vec![], 128);
        let g = StateVector::from_vec(vec![0.2, 0.8, -0.5]).unwrap();
        let stored = adjoint_solve(&field, &traj, &g, &AdjointOptions::default()).unwrap();
        let recomputed = adjoint_solve(
            &field,
            &traj,
            &g,
            &AdjointOptions { mode: AdjointMode::Recompute, ..Default::default() },
        )
        .unwrap();
        let gap = stored.dq_dc.sub(&recomputed.dq_dc).norm_inf();
        assert!(gap < 1e-4 * stored.dq_dc.norm_inf(), "gap {gap}");
    }

    #[test]
    fn untracked_scalars_leave_w_bit_identical() {
        let (field, _) = analytic_field();
        let traj =
            run_trajectory(&field, vec![0.3, -0.2], vec![("tau".into(), 2.0), ("zeta".into(), 9.0)], 32);
        let g = StateVector::from_vec(vec![0.7, -0.4, 1.3]).unwrap();
        let tracked = adjoint_solve(&field, &traj, &g, &AdjointOptions::default()).unwrap();
        let untracked = adjoint_solve(
            &field,
            &traj,
            &g,
            &AdjointOptions { track_scalars: false, ..Default::default() },
        )
        .unwrap();
        assert_eq!(tracked.dq_dc, untracked.dq_dc);
        assert_eq!(tracked.dq_dx_t, untracked.dq_dx_t);
        assert_eq!(tracked.dq_dscalar.len(), 2);
        assert!(untracked.dq_dscalar.iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn batch_of_one_equals_single_result_bitwise() {
        let (field, _) = analytic_field();
        let cond =
            Conditioning::vector_only(StateVector::from_vec(vec![0.1, 0.9]).unwrap());
        let grid = edm_time_grid(24, 0.002, 80.0, 7.0).unwrap();
        let q = QuantitySpec::WeightedGlobalMean { lat_weighted: false, channel: None };

        let batch = batch_sensitivity(
            &field,
            std::slice::from_ref(&cond),
            &q,
            SeedPolicy::Fixed { seed: 5 },
            &grid,
            Solver::Heun,
            GradientMode::Discrete,
            None,
        )
        .unwrap();

        let xi = gaussian_noise(&[3], 5);
        let traj = sample(&field, &xi, &cond, &grid, Solver::Heun, true).unwrap();
        let g = q.gradient(traj.final_state()).unwrap();
        let single = discrete_adjoint(&field, &traj, &g).unwrap();
        assert_eq!(batch.mean_dq_dc, single.dq_dc);
        assert_eq!(batch.n_ok, 1);
    }

    #[test]
    fn identical_conditionings_with_fixed_noise_average_to_each_sample() {
        let (field, _) = analytic_field();
        let cond =
            Conditioning::vector_only(StateVector::from_vec(vec![0.1, 0.9]).unwrap());
        let conds = vec![cond; 4];
        let grid = edm_time_grid(16, 0.002, 80.0, 7.0).unwrap();
        let q = QuantitySpec::Component { index: 1, channel: None };
        let batch = batch_sensitivity(
            &field,
            &conds,
            &q,
            SeedPolicy::Fixed { seed: 2 },
            &grid,
            Solver::Heun,
            GradientMode::Stored,
            None,
        )
        .unwrap();
        let first = batch.per_sample[0].outcome.as_ref().unwrap();
        assert_eq!(batch.mean_dq_dc, first.dq_dc);
    }

    #[test]
    fn diverging_samples_are_excluded_and_reported() {
        /// u = -x, but explodes when the conditioner is past a threshold.
        struct FragileField;
        impl VelocityField for FragileField {
            fn descriptor(&self) -> FieldDescriptor {
                FieldDescriptor {
                    name: "fragile".into(),
                    state_shape: vec![1],
                    cond_shape: vec![1],
                    n_scalars: None,
                    regular_at_zero: true,
                }
            }
            fn eval(&self, x: &StateVector, _t: f64, cond: &Conditioning) -> Result<StateVector> {
                if cond.c().data()[0] > 0.5 {
                    Ok(x.with_data_unchecked(vec![x.data()[0] * 1e308 * 1e308]))
                } else {
                    Ok(x.scaled(-1.0))
                }
            }
            fn vjp_state(
                &self,
                a: &StateVector,
                _x: &StateVector,
                _t: f64,
                _c: &Conditioning,
            ) -> Result<StateVector> {
                Ok(a.scaled(-1.0))
            }
            fn vjp_cond(
                &self,
                _a: &StateVector,
                _x: &StateVector,
                _t: f64,
                cond: &Conditioning,
            ) -> Result<CondVjp> {
                Ok(CondVjp { c: StateVector::zeros_like(cond.c()), scalars: vec![] })
            }
        }

        let conds: Vec<Conditioning> = [0.0, 0.9, 0.2]
            .iter()
            .map(|&v| Conditioning::vector_only(StateVector::from_vec(vec![v]).unwrap()))
            .collect();
        let grid = edm_time_grid(8, 0.002, 2.0, 7.0).unwrap();
        let q = QuantitySpec::Component { index: 0, channel: None };
        let batch = batch_sensitivity(
            &FragileField,
            &conds,
            &q,
            SeedPolicy::Fixed { seed: 1 },
            &grid,
            Solver::Euler,
            GradientMode::Discrete,
            None,
        )
        .unwrap();
        assert_eq!(batch.n_ok, 2);
        assert_eq!(batch.n_failed, 1);
        assert!(batch.per_sample[1].outcome.as_ref().unwrap_err().contains("divergence"));

        // all samples failing is a batch failure
        let all_bad =
            vec![Conditioning::vector_only(StateVector::from_vec(vec![0.9]).unwrap()); 2];
        let err = batch_sensitivity(
            &FragileField,
            &all_bad,
            &q,
            SeedPolicy::Fixed { seed: 1 },
            &grid,
            Solver::Euler,
            GradientMode::Discrete,
            None,
        );
        assert!(matches!(err, Err(Error::BatchFailure(_))));
    }

    #[test]
    fn grouping_produces_per_key_means() {
        let (field, _) = analytic_field();
        let conds: Vec<Conditioning> = (0..6)
            .map(|i| {
                Conditioning::vector_only(
                    StateVector::from_vec(vec![0.1 * i as f64, -0.05 * i as f64]).unwrap(),
                )
            })
            .collect();
        let groups = vec![0, 0, 1, 1, 2, 2];
        let grid = edm_time_grid(12, 0.002, 80.0, 7.0).unwrap();
        let q = QuantitySpec::Component { index: 0, channel: None };
        let batch = batch_sensitivity(
            &field,
            &conds,
            &q,
            SeedPolicy::PerSample { base_seed: 100 },
            &grid,
            Solver::Heun,
            GradientMode::Discrete,
            Some(&groups),
        )
        .unwrap();
        let gm = batch.group_means.unwrap();
        assert_eq!(gm.len(), 3);
        assert!(gm.iter().all(|g| g.count == 2));
        assert_eq!(gm[0].key, 0);
        assert_eq!(gm[2].key, 2);
    }
}
