//! Hand-written MLP with exact reverse-mode derivatives, plus the EDM
//! preconditioning that turns it into a denoiser.
//!
//! The network is deliberately small: dense layers with tanh hidden
//! activations and a linear output. tanh keeps the Jacobians smooth, so
//! finite-difference verification of the VJPs is clean. There is no autodiff
//! framework anywhere; the backward pass below is the single reverse-mode
//! implementation the whole crate uses (velocity VJPs and training both).

use crate::error::{Error, Result};
use crate::noise::{seeded_rng, standard_normal_vec};
use crate::velocity::{DenoiseVjp, Denoiser};

/// Dense feed-forward network. `widths = [in, hidden..., out]`; weights are
/// row-major `(out_dim, in_dim)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Stash of forward-pass values needed by the backward pass: the input and
/// every layer's post-activation output.
#[derive(Debug, Clone)]
pub struct MlpActivations {
    layers: Vec<Vec<f64>>,
}

impl MlpActivations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("forward pass stores at least the input")
    }
}

/// Parameter gradients, same layout as the network parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }
}

impl Mlp {
    /// Initialize with `N(0, 1/fan_in)` weights and zero biases, from a
    /// seeded ChaCha12 stream.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = seeded_rng(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w = standard_normal_vec(&mut rng, fan_in * fan_out)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp { widths: widths.to_vec(), weights, biases })
    }

    /// Rebuild from stored parameters (checkpoint loading).
    pub fn from_parts(widths: Vec<usize>, weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Format(format!("invalid layer widths {widths:?}")));
        }
        let n_layers = widths.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::Format("layer count mismatch".into()));
        }
        for l in 0..n_layers {
            if weights[l].len() != widths[l] * widths[l + 1] || biases[l].len() != widths[l + 1] {
                return Err(Error::Format(format!("parameter shapes do not chain at layer {l}")));
            }
            if weights[l].iter().chain(&biases[l]).any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("non-finite parameter in layer {l}")));
            }
        }
        Ok(Mlp { widths, weights, biases })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Apply `param += scale * update` across all parameters.
    pub(crate) fn apply_update(&mut self, update: &MlpGrads, scale: f64) {
        for (w, g) in self.weights.iter_mut().zip(&update.weights) {
            for (x, y) in w.iter_mut().zip(g) {
                *x += scale * y;
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&update.biases) {
            for (x, y) in b.iter_mut().zip(g) {
                *x += scale * y;
            }
        }
    }

    /// Layered tanh forward pass (linear final layer).
    pub fn forward(&self, input: &[f64]) -> Result<MlpActivations> {
        if input.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "input length {} does not match network input dim {}",
                input.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.n_layers();
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(input.to_vec());
        for l in 0..n_layers {
            let in_dim = self.widths[l];
            let h = layers.last().unwrap();
            let mut z = self.biases[l].clone();
            for (zo, row) in z.iter_mut().zip(self.weights[l].chunks_exact(in_dim)) {
                let mut acc = 0.0;
                for (wi, hi) in row.iter().zip(h.iter()) {
                    acc += wi * hi;
                }
                *zo += acc;
            }
            if l < n_layers - 1 {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            layers.push(z);
        }
        Ok(MlpActivations { layers })
    }

    /// Reverse pass through the stored activations. Returns the gradient of
    /// `<cotangent, output>` with respect to the input, and optionally fills
    /// parameter gradients.
    fn backward_impl(
        &self,
        acts: &MlpActivations,
        cotangent: &[f64],
        mut grads: Option<&mut MlpGrads>,
    ) -> Result<Vec<f64>> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::Contract("cotangent length does not match output dim".into()));
        }
        if acts.layers.len() != self.n_layers() + 1 {
            return Err(Error::Contract("activations do not match network depth".into()));
        }
        let n_layers = self.n_layers();
        let mut g = cotangent.to_vec();
        for l in (0..n_layers).rev() {
            let in_dim = self.widths[l];
            // through the activation (hidden layers only): tanh'(z) = 1 - h^2
            if l < n_layers - 1 {
                let h = &acts.layers[l + 1];
                for (gi, hi) in g.iter_mut().zip(h) {
                    *gi *= 1.0 - hi * hi;
                }
            }
            if let Some(store) = grads.as_deref_mut() {
                let input = &acts.layers[l];
                for ((row, go), bo) in store.weights[l]
                    .chunks_exact_mut(in_dim)
                    .zip(&g)
                    .zip(store.biases[l].iter_mut())
                {
                    for (wi, xi) in row.iter_mut().zip(input.iter()) {
                        *wi += go * xi;
                    }
                    *bo += go;
                }
            }
            let mut g_prev = vec![0.0; in_dim];
            for (row, go) in self.weights[l].chunks_exact(in_dim).zip(&g) {
                for (pi, wi) in g_prev.iter_mut().zip(row) {
                    *pi += go * wi;
                }
            }
            g = g_prev;
        }
        Ok(g)
    }

    /// Input gradient only (velocity VJP hot path).
    pub fn backward_input(&self, acts: &MlpActivations, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.backward_impl(acts, cotangent, None)
    }

    /// Full reverse pass: forward, then gradients of `<cotangent, output>`
    /// with respect to the input and every parameter.
    pub fn forward_backward(
        &self,
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, MlpGrads)> {
        let acts = self.forward(input)?;
        let mut grads = MlpGrads::zeros_like(self);
        let input_grad = self.backward_impl(&acts, cotangent, Some(&mut grads))?;
        Ok((acts.output().to_vec(), input_grad, grads))
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads::zeros_like(self)
    }

    /// Accumulating reverse pass against existing activations.
    pub fn backward_accumulate(
        &self,
        acts: &MlpActivations,
        cotangent: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        self.backward_impl(acts, cotangent, Some(grads))
    }
}

/// Standard EDM preconditioning coefficients as functions of sigma.
#[derive(Debug, Clone, Copy)]
pub struct EdmPrecond {
    pub sigma_data: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PrecondCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Default for EdmPrecond {
    fn default() -> Self {
        EdmPrecond { sigma_data: 0.5 }
    }
}

impl EdmPrecond {
    pub fn coefficients(&self, sigma: f64) -> PrecondCoeffs {
        let sd2 = self.sigma_data * self.sigma_data;
        let total = sigma * sigma + sd2;
        PrecondCoeffs {
            c_skip: sd2 / total,
            c_out: sigma * self.sigma_data / total.sqrt(),
            c_in: 1.0 / total.sqrt(),
            c_noise: sigma.ln() / 4.0,
        }
    }

    /// EDM loss weight `lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        (sigma * sigma + sd * sd) / (sigma * sd * (sigma * sd))
    }
}

/// EDM-preconditioned MLP denoiser:
///
/// `D(x; sigma, cond) = c_skip x + c_out F(c_in x, c_noise, c, scaled scalars)`
///
/// Scalar conditioners enter as plain appended input features, each
/// multiplied by a fixed per-scalar input scale (so e.g. a day-of-year tau
/// can be fed in days while the network sees a unit-range feature). The
/// scales are part of the model and the VJPs chain through them.
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    net: Mlp,
    precond: EdmPrecond,
    state_dim: usize,
    cond_dim: usize,
    scalar_scales: Vec<f64>,
}

impl MlpDenoiser {
    pub fn new(
        net: Mlp,
        precond: EdmPrecond,
        state_dim: usize,
        cond_dim: usize,
        scalar_scales: Vec<f64>,
    ) -> Result<Self> {
        let expect_in = state_dim + 1 + cond_dim + scalar_scales.len();
        if net.input_dim() != expect_in {
            return Err(Error::Config(format!(
                "network input dim {} != state + noise + cond + scalars = {}",
                net.input_dim(),
                expect_in
            )));
        }
        if net.output_dim() != state_dim {
            return Err(Error::Config(format!(
                "network output dim {} != state dim {}",
                net.output_dim(),
                state_dim
            )));
        }
        if scalar_scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("scalar scales must be finite".into()));
        }
        Ok(MlpDenoiser { net, precond, state_dim, cond_dim, scalar_scales })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn precond(&self) -> EdmPrecond {
        self.precond
    }

    pub fn scalar_scales(&self) -> &[f64] {
        &self.scalar_scales
    }

    /// Assemble the raw network input for a given sigma.
    pub fn network_input(&self, x: &[f64], sigma: f64, c: &[f64], scalars: &[f64]) -> (Vec<f64>, PrecondCoeffs) {
        let k = self.precond.coefficients(sigma);
        let mut input = Vec::with_capacity(self.net.input_dim());
        input.extend(x.iter().map(|v| k.c_in * v));
        input.push(k.c_noise);
        input.extend_from_slice(c);
        input.extend(scalars.iter().zip(&self.scalar_scales).map(|(s, sc)| s * sc));
        (input, k)
    }
}

impl Denoiser for MlpDenoiser {
    fn name(&self) -> String {
        format!("mlp{:?}", self.net.widths())
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn n_scalars(&self) -> usize {
        self.scalar_scales.len()
    }

    fn denoise(&self, x: &[f64], sigma: f64, c: &[f64], scalars: &[f64]) -> Vec<f64> {
        let (input, k) = self.network_input(x, sigma, c, scalars);
        let acts = self.net.forward(&input).expect("input assembled to network dims");
        acts.output()
            .iter()
            .zip(x)
            .map(|(yi, xi)| k.c_skip * xi + k.c_out * yi)
            .collect()
    }

    fn denoise_vjp(&self, a: &[f64], x: &[f64], sigma: f64, c: &[f64], scalars: &[f64]) -> DenoiseVjp {
        let (input, k) = self.network_input(x, sigma, c, scalars);
        let acts = self.net.forward(&input).expect("input assembled to network dims");
        // One backward pass with cotangent c_out * a covers x, c and scalar
        // gradients at once.
        let cot: Vec<f64> = a.iter().map(|ai| k.c_out * ai).collect();
        let gin = self.net.backward_input(&acts, &cot).expect("cotangent matches output dim");

        let d = self.state_dim;
        let m = self.cond_dim;
        let dx = a
            .iter()
            .zip(&gin[..d])
            .map(|(ai, gi)| k.c_skip * ai + k.c_in * gi)
            .collect();
        let dc = gin[d + 1..d + 1 + m].to_vec();
        let dscalars = gin[d + 1 + m..]
            .iter()
            .zip(&self.scalar_scales)
            .map(|(g, sc)| g * sc)
            .collect();
        DenoiseVjp { dx, dc, dscalars }
    }
}
