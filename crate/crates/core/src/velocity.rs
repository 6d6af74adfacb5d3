//! Velocity fields `u(x, t, cond)` with value and vector-Jacobian-product
//! evaluation.
//!
//! The adjoint integration consumes three primitives per field: the velocity
//! itself, `aᵀ ∂u/∂x`, and `aᵀ ∂u/∂(conditioning)`. All VJPs are implemented
//! analytically per field; finite differences are reserved for the oracle
//! module that verifies them.
//!
//! Two families ship here:
//!
//! - [`AnalyticGaussianField`]: the probability-flow velocity of a linear
//!   Gaussian conditional law, `u = t (x - M c) / (s^2 + t^2)`. Its endpoint
//!   map has a closed form, which makes it the desk-scale oracle.
//! - [`EdmFlowField`]: the flow reparameterization `u = (x - D(x; t, cond)) / t`
//!   of any [`Denoiser`], with VJPs chained through the wrapper analytically.

use crate::error::{Error, Result};
use crate::state::{Conditioning, Matrix, StateVector};

/// Shape and capability summary of a velocity field.
#[derive(Debug, Clone)]
pub struct FieldDescriptor {
    pub name: String,
    pub state_shape: Vec<usize>,
    pub cond_shape: Vec<usize>,
    /// Exact number of scalar conditioners consumed, or `None` if any number
    /// is accepted (and ignored beyond the vector conditioner).
    pub n_scalars: Option<usize>,
    /// Whether the velocity is well defined at `t = 0`. EDM-wrapped fields
    /// are singular there; the analytic field is not.
    pub regular_at_zero: bool,
}

/// Conditioning cotangents: `aᵀ ∂u/∂c` plus one entry `aᵀ ∂u/∂s_k` per
/// scalar conditioner, in conditioning order.
#[derive(Debug, Clone)]
pub struct CondVjp {
    pub c: StateVector,
    pub scalars: Vec<f64>,
}

/// A deterministic velocity field with exact reverse-mode products.
pub trait VelocityField: Send + Sync {
    fn descriptor(&self) -> FieldDescriptor;

    /// `u(x, t, cond)`, same shape as `x`.
    fn eval(&self, x: &StateVector, t: f64, cond: &Conditioning) -> Result<StateVector>;

    /// `aᵀ ∂u/∂x`, same shape as `x`.
    fn vjp_state(
        &self,
        a: &StateVector,
        x: &StateVector,
        t: f64,
        cond: &Conditioning,
    ) -> Result<StateVector>;

    /// `(aᵀ ∂u/∂c, [aᵀ ∂u/∂s_k])`.
    fn vjp_cond(
        &self,
        a: &StateVector,
        x: &StateVector,
        t: f64,
        cond: &Conditioning,
    ) -> Result<CondVjp>;

    /// Both VJPs at once. Implementations that share a backward pass
    /// override this; the default just calls the two primitives.
    fn vjp_all(
        &self,
        a: &StateVector,
        x: &StateVector,
        t: f64,
        cond: &Conditioning,
    ) -> Result<(StateVector, CondVjp)> {
        Ok((self.vjp_state(a, x, t, cond)?, self.vjp_cond(a, x, t, cond)?))
    }
}

/// Validate `(x, t, cond)` against a field descriptor.
pub(crate) fn check_field_args(
    desc: &FieldDescriptor,
    x: &StateVector,
    t: f64,
    cond: &Conditioning,
) -> Result<()> {
    if !t.is_finite() || t < 0.0 || (t == 0.0 && !desc.regular_at_zero) {
        return Err(Error::Domain(format!("velocity '{}' undefined at t = {t}", desc.name)));
    }
    if x.shape() != desc.state_shape.as_slice() {
        return Err(Error::Contract(format!(
            "state shape {:?} does not match field '{}' ({:?})",
            x.shape(),
            desc.name,
            desc.state_shape
        )));
    }
    if cond.c().shape() != desc.cond_shape.as_slice() {
        return Err(Error::Contract(format!(
            "conditioning shape {:?} does not match field '{}' ({:?})",
            cond.c().shape(),
            desc.name,
            desc.cond_shape
        )));
    }
    if let Some(k) = desc.n_scalars {
        if cond.n_scalars() != k {
            return Err(Error::Contract(format!(
                "field '{}' expects {k} scalar conditioners, got {}",
                desc.name,
                cond.n_scalars()
            )));
        }
    }
    Ok(())
}

/// Probability-flow velocity of the conditional law `x ~ N(M c, s^2 I)`:
///
/// `u(x, t, c) = t (x - M c) / (s^2 + t^2)`
///
/// Regular at `t = 0` and linear in both `x` and `c`, so every derivative
/// has a closed form. Scalar conditioners are accepted and ignored.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianField {
    mean_map: Matrix,
    noise_std: f64,
    state_shape: Vec<usize>,
    cond_shape: Vec<usize>,
}

impl AnalyticGaussianField {
    pub fn new(mean_map: Matrix, noise_std: f64) -> Result<Self> {
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std must be positive, got {noise_std}")));
        }
        let state_shape = vec![mean_map.rows()];
        let cond_shape = vec![mean_map.cols()];
        Ok(AnalyticGaussianField { mean_map, noise_std, state_shape, cond_shape })
    }

    /// Reinterpret the conditioning as a grid shape with the same element count.
    pub fn with_cond_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.mean_map.cols() {
            return Err(Error::Config("cond shape does not match mean map columns".into()));
        }
        self.cond_shape = shape;
        Ok(self)
    }

    pub fn mean_map(&self) -> &Matrix {
        &self.mean_map
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn gain(&self, t: f64) -> f64 {
        t / (self.noise_std * self.noise_std + t * t)
    }
}

impl VelocityField for AnalyticGaussianField {
    fn descriptor(&self) -> FieldDescriptor {
        FieldDescriptor {
            name: "analytic_gaussian".into(),
            state_shape: self.state_shape.clone(),
            cond_shape: self.cond_shape.clone(),
            n_scalars: None,
            regular_at_zero: true,
        }
    }

    fn eval(&self, x: &StateVector, t: f64, cond: &Conditioning) -> Result<StateVector> {
        check_field_args(&self.descriptor(), x, t, cond)?;
        let mean = self.mean_map.matvec(cond.c().data());
        let g = self.gain(t);
        let data = x.data().iter().zip(&mean).map(|(xi, mi)| g * (xi - mi)).collect();
        Ok(x.with_data_unchecked(data))
    }

    fn vjp_state(
        &self,
        a: &StateVector,
        x: &StateVector,
        t: f64,
        cond: &Conditioning,
    ) -> Result<StateVector> {
        check_field_args(&self.descriptor(), x, t, cond)?;
        Ok(a.scaled(self.gain(t)))
    }

    fn vjp_cond(
        &self,
        a: &StateVector,
        x: &StateVector,
        t: f64,
        cond: &Conditioning,
    ) -> Result<CondVjp> {
        check_field_args(&self.descriptor(), x, t, cond)?;
        let g = self.gain(t);
        let atm = self.mean_map.vecmat(a.data());
        let c = StateVector::zeros(&self.cond_shape).with_data_unchecked(
            atm.into_iter().map(|v| -g * v).collect(),
        );
        Ok(CondVjp { c, scalars: vec![0.0; cond.n_scalars()] })
    }
}

/// Cotangent products through a denoiser: `aᵀ ∂D/∂x`, `aᵀ ∂D/∂c`, and one
/// `aᵀ ∂D/∂s_k` per scalar conditioner.
#[derive(Debug, Clone)]
pub struct DenoiseVjp {
    pub dx: Vec<f64>,
    pub dc: Vec<f64>,
    pub dscalars: Vec<f64>,
}

/// A denoiser `D(x; sigma, cond)` predicting the clean sample from a noised
/// one, with exact reverse-mode products. Preconditioning, if any, lives
/// inside the implementation.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> String;
    fn state_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn n_scalars(&self) -> usize;
    fn denoise(&self, x: &[f64], sigma: f64, c: &[f64], scalars: &[f64]) -> Vec<f64>;
    fn denoise_vjp(&self, a: &[f64], x: &[f64], sigma: f64, c: &[f64], scalars: &[f64])
        -> DenoiseVjp;
}

/// Flow reparameterization of a denoiser: `u = (x - D(x; t, cond)) / t`.
///
/// The VJPs chain through the wrapper analytically, e.g.
/// `aᵀ ∂u/∂x = (a - aᵀ ∂D/∂x) / t`. Singular at `t = 0`.
#[derive(Debug, Clone)]
pub struct EdmFlowField<D: Denoiser> {
    denoiser: D,
    state_shape: Vec<usize>,
    cond_shape: Vec<usize>,
}

impl<D: Denoiser> EdmFlowField<D> {
    pub fn new(denoiser: D) -> Self {
        let state_shape = vec![denoiser.state_dim()];
        let cond_shape = vec![denoiser.cond_dim()];
        EdmFlowField { denoiser, state_shape, cond_shape }
    }

    pub fn with_shapes(mut self, state_shape: Vec<usize>, cond_shape: Vec<usize>) -> Result<Self> {
        if state_shape.iter().product::<usize>() != self.denoiser.state_dim() {
            return Err(Error::Config("state shape does not match denoiser".into()));
        }
        if cond_shape.iter().product::<usize>() != self.denoiser.cond_dim() {
            return Err(Error::Config("cond shape does not match denoiser".into()));
        }
        self.state_shape = state_shape;
        self.cond_shape = cond_shape;
        Ok(self)
    }

    pub fn denoiser(&self) -> &D {
        &self.denoiser
    }
}

impl<D: Denoiser> VelocityField for EdmFlowField<D> {
    fn descriptor(&self) -> FieldDescriptor {
        FieldDescriptor {
            name: format!("edm_flow({})", self.denoiser.name()),
            state_shape: self.state_shape.clone(),
            cond_shape: self.cond_shape.clone(),
            n_scalars: Some(self.denoiser.n_scalars()),
            regular_at_zero: false,
        }
    }

    fn eval(&self, x: &StateVector, t: f64, cond: &Conditioning) -> Result<StateVector> {
        check_field_args(&self.descriptor(), x, t, cond)?;
        let d = self.denoiser.denoise(x.data(), t, cond.c().data(), &cond.scalar_values());
        let data = x.data().iter().zip(&d).map(|(xi, di)| (xi - di) / t).collect();
        Ok(x.with_data_unchecked(data))
    }

    fn vjp_state(
        &self,
        a: &StateVector,
        x: &StateVector,
        t: f64,
        cond: &Conditioning,
    ) -> Result<StateVector> {
        Ok(self.vjp_all(a, x, t, cond)?.0)
    }

    fn vjp_cond(
        &self,
        a: &StateVector,
        x: &StateVector,
        t: f64,
        cond: &Conditioning,
    ) -> Result<CondVjp> {
        Ok(self.vjp_all(a, x, t, cond)?.1)
    }

    fn vjp_all(
        &self,
        a: &StateVector,
        x: &StateVector,
        t: f64,
        cond: &Conditioning,
    ) -> Result<(StateVector, CondVjp)> {
        check_field_args(&self.descriptor(), x, t, cond)?;
        let vjp =
            self.denoiser.denoise_vjp(a.data(), x.data(), t, cond.c().data(), &cond.scalar_values());
        let dx = a
            .data()
            .iter()
            .zip(&vjp.dx)
            .map(|(ai, di)| (ai - di) / t)
            .collect::<Vec<f64>>();
        let dc = StateVector::zeros(&self.cond_shape)
            .with_data_unchecked(vjp.dc.iter().map(|v| -v / t).collect());
        let dscalars = vjp.dscalars.iter().map(|v| -v / t).collect();
        Ok((a.with_data_unchecked(dx), CondVjp { c: dc, scalars: dscalars }))
    }
}

/// `D(x) = x`. The wrapped velocity is identically zero.
#[derive(Debug, Clone)]
pub struct IdentityDenoiser {
    pub state_dim: usize,
    pub cond_dim: usize,
    pub n_scalars: usize,
}

impl Denoiser for IdentityDenoiser {
    fn name(&self) -> String {
        "identity".into()
    }
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn cond_dim(&self) -> usize {
        self.cond_dim
    }
    fn n_scalars(&self) -> usize {
        self.n_scalars
    }
    fn denoise(&self, x: &[f64], _sigma: f64, _c: &[f64], _s: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn denoise_vjp(&self, a: &[f64], _x: &[f64], _sigma: f64, _c: &[f64], _s: &[f64]) -> DenoiseVjp {
        DenoiseVjp { dx: a.to_vec(), dc: vec![0.0; self.cond_dim], dscalars: vec![0.0; self.n_scalars] }
    }
}

/// `D(x) = const`, independent of every input.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    pub value: Vec<f64>,
    pub cond_dim: usize,
    pub n_scalars: usize,
}

impl Denoiser for ConstantDenoiser {
    fn name(&self) -> String {
        "constant".into()
    }
    fn state_dim(&self) -> usize {
        self.value.len()
    }
    fn cond_dim(&self) -> usize {
        self.cond_dim
    }
    fn n_scalars(&self) -> usize {
        self.n_scalars
    }
    fn denoise(&self, _x: &[f64], _sigma: f64, _c: &[f64], _s: &[f64]) -> Vec<f64> {
        self.value.clone()
    }
    fn denoise_vjp(&self, a: &[f64], _x: &[f64], _sigma: f64, _c: &[f64], _s: &[f64]) -> DenoiseVjp {
        DenoiseVjp {
            dx: vec![0.0; a.len()],
            dc: vec![0.0; self.cond_dim],
            dscalars: vec![0.0; self.n_scalars],
        }
    }
}
