//! Toy-scale denoiser training on synthetic conditional data.
//!
//! The objective is the EDM denoising loss with log-normal sigma sampling
//! and the standard sigma-weighting, expressed in preconditioned form: the
//! network F is regressed onto `(x0 - c_skip x) / c_out`, which makes the
//! effective weight uniform. Optimization is plain Adam with a linear
//! learning-rate ramp-down. Everything is deterministic given the task
//! seed, the init seed and the batch seed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mlp::{EdmPrecond, Mlp, MlpDenoiser, MlpGrads};
use crate::noise::{seeded_rng, standard_normal_vec};
use crate::state::Matrix;

/// Conditional data law: `x | c`.
#[derive(Debug, Clone)]
pub enum GeneratorKind {
    /// `x = M c + s eps`.
    ConditionalGaussian,
    /// Two-component mixture: with probability `weight` the sample is
    /// `M c + offset_a + s eps`, otherwise `M c + offset_b + std_b eps`.
    ConditionalMixture { weight: f64, offset_a: Vec<f64>, offset_b: Vec<f64>, std_b: f64 },
}

/// A synthetic conditional-generation task.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub mean_map: Matrix,
    pub noise_std: f64,
    pub kind: GeneratorKind,
    /// Box from which the vector conditioner is drawn, per component.
    pub cond_low: f64,
    pub cond_high: f64,
    /// Uniform training range per scalar conditioner (e.g. `(0, 366)` for a
    /// day-of-year tau). The data law does not depend on them; they are
    /// extra network inputs.
    pub scalar_ranges: Vec<(f64, f64)>,
    pub n_samples: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.mean_map.rows() != self.data_dim || self.mean_map.cols() != self.cond_dim {
            return Err(Error::Config("mean map shape does not match task dims".into()));
        }
        if self.noise_std.is_nan() || self.noise_std <= 0.0 {
            return Err(Error::Config("task noise std must be positive".into()));
        }
        if self.cond_low.is_nan() || self.cond_high.is_nan() || self.cond_low >= self.cond_high {
            return Err(Error::Config("conditioning box is empty".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("dataset size must be positive".into()));
        }
        if let GeneratorKind::ConditionalMixture { weight, offset_a, offset_b, std_b } = &self.kind
        {
            if weight.is_nan() || *weight <= 0.0 || *weight >= 1.0 {
                return Err(Error::Config("mixture weight must lie in (0, 1)".into()));
            }
            if offset_a.len() != self.data_dim || offset_b.len() != self.data_dim {
                return Err(Error::Config("mixture offsets must match the data dim".into()));
            }
            if std_b.is_nan() || *std_b <= 0.0 {
                return Err(Error::Config("mixture std must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One training pair.
#[derive(Debug, Clone)]
pub struct DataPair {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
}

/// Draw the dataset for a task; deterministic given the task seed.
pub fn generate_dataset(task: &SyntheticTask) -> Result<Vec<DataPair>> {
    task.validate()?;
    let mut rng = seeded_rng(task.seed);
    let mut out = Vec::with_capacity(task.n_samples);
    for _ in 0..task.n_samples {
        let c: Vec<f64> =
            (0..task.cond_dim).map(|_| rng.gen_range(task.cond_low..task.cond_high)).collect();
        let mean = task.mean_map.matvec(&c);
        let eps = standard_normal_vec(&mut rng, task.data_dim);
        let x = match &task.kind {
            GeneratorKind::ConditionalGaussian => mean
                .iter()
                .zip(&eps)
                .map(|(m, e)| m + task.noise_std * e)
                .collect(),
            GeneratorKind::ConditionalMixture { weight, offset_a, offset_b, std_b } => {
                let pick_a = rng.gen_range(0.0..1.0) < *weight;
                let (offset, std) =
                    if pick_a { (offset_a, task.noise_std) } else { (offset_b, *std_b) };
                mean.iter()
                    .zip(&eps)
                    .zip(offset)
                    .map(|((m, e), o)| m + o + std * e)
                    .collect()
            }
        };
        out.push(DataPair { x, c });
    }
    Ok(out)
}

/// Network architecture for the denoiser.
#[derive(Debug, Clone)]
pub struct TrainArch {
    pub hidden: Vec<usize>,
    pub sigma_data: f64,
    /// Input scale per scalar conditioner (raw value times scale feeds the
    /// network); one entry per scalar the model should accept.
    pub scalar_scales: Vec<f64>,
}

impl Default for TrainArch {
    fn default() -> Self {
        TrainArch { hidden: vec![64, 64], sigma_data: 0.5, scalar_scales: vec![] }
    }
}

/// Optimization settings. Sigma is drawn log-normally with location
/// `sigma_pmean` and scale `sigma_pstd`; the learning rate ramps linearly
/// from `lr` to `final_lr`.
#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub sigma_pmean: f64,
    pub sigma_pstd: f64,
    pub init_seed: u64,
    pub batch_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            steps: 4000,
            batch_size: 128,
            lr: 2e-3,
            final_lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            sigma_pmean: -1.2,
            sigma_pstd: 1.2,
            init_seed: 1,
            batch_seed: 2,
        }
    }
}

/// Trained model plus the per-step loss history.
#[derive(Debug)]
pub struct TrainOutput {
    pub denoiser: MlpDenoiser,
    pub loss_history: Vec<f64>,
}

struct Adam {
    m: MlpGrads,
    v: MlpGrads,
}

impl Adam {
    fn new(net: &Mlp) -> Self {
        Adam { m: net.zero_grads(), v: net.zero_grads() }
    }

    fn update(&mut self, grads: &MlpGrads, hyper: &Hyperparams, step: usize, lr: f64) -> MlpGrads {
        let t = (step + 1) as f64;
        let bias1 = 1.0 - hyper.beta1.powf(t);
        let bias2 = 1.0 - hyper.beta2.powf(t);
        let mut delta = MlpGrads {
            weights: grads.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: grads.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        let groups = [
            (&mut self.m.weights, &mut self.v.weights, &grads.weights, &mut delta.weights),
            (&mut self.m.biases, &mut self.v.biases, &grads.biases, &mut delta.biases),
        ];
        for (m_layers, v_layers, g_layers, d_layers) in groups {
            for ((m, v), (g, d)) in
                m_layers.iter_mut().zip(v_layers.iter_mut()).zip(g_layers.iter().zip(d_layers))
            {
                for i in 0..g.len() {
                    m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
                    v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    d[i] = -lr * m_hat / (v_hat.sqrt() + hyper.adam_eps);
                }
            }
        }
        delta
    }
}

/// Train an EDM denoiser on a synthetic task.
///
/// With `steps = 0` the initialized network is returned unchanged. The loss
/// history holds the batch-mean preconditioned squared error per step; a
/// non-finite loss aborts with the step index.
pub fn train(task: &SyntheticTask, arch: &TrainArch, hyper: &Hyperparams) -> Result<TrainOutput> {
    task.validate()?;
    if arch.scalar_scales.len() != task.scalar_ranges.len() {
        return Err(Error::Config(format!(
            "arch has {} scalar scales but the task trains {} scalar inputs",
            arch.scalar_scales.len(),
            task.scalar_ranges.len()
        )));
    }
    let d = task.data_dim;
    let m = task.cond_dim;
    let k = arch.scalar_scales.len();
    let mut widths = Vec::with_capacity(arch.hidden.len() + 2);
    widths.push(d + 1 + m + k);
    widths.extend_from_slice(&arch.hidden);
    widths.push(d);

    let net = Mlp::init(&widths, hyper.init_seed)?;
    let precond = EdmPrecond { sigma_data: arch.sigma_data };
    let mut denoiser = MlpDenoiser::new(net, precond, d, m, arch.scalar_scales.clone())?;

    if hyper.steps == 0 {
        return Ok(TrainOutput { denoiser, loss_history: vec![] });
    }

    let dataset = generate_dataset(task)?;
    let mut rng = seeded_rng(hyper.batch_seed);
    let mut adam = Adam::new(denoiser.net());
    let mut loss_history = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let mut grads = denoiser.net().zero_grads();
        let mut loss = 0.0;
        for _ in 0..hyper.batch_size {
            let pair = &dataset[rng.gen_range(0..dataset.len())];
            let scalars: Vec<f64> =
                task.scalar_ranges.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect();
            let z = standard_normal_vec(&mut rng, 1)[0];
            let sigma = (hyper.sigma_pmean + hyper.sigma_pstd * z).exp();
            let eps = standard_normal_vec(&mut rng, d);
            let noised: Vec<f64> =
                pair.x.iter().zip(&eps).map(|(x0, e)| x0 + sigma * e).collect();

            let (input, coeffs) = denoiser.network_input(&noised, sigma, &pair.c, &scalars);
            let acts = denoiser.net().forward(&input)?;
            let target: Vec<f64> = pair
                .x
                .iter()
                .zip(&noised)
                .map(|(x0, xn)| (x0 - coeffs.c_skip * xn) / coeffs.c_out)
                .collect();
            let residual: Vec<f64> =
                acts.output().iter().zip(&target).map(|(y, t)| y - t).collect();
            loss += residual.iter().map(|r| r * r).sum::<f64>();
            let cot: Vec<f64> = residual.iter().map(|r| 2.0 * r).collect();
            denoiser.net().backward_accumulate(&acts, &cot, &mut grads)?;
        }
        let inv_batch = 1.0 / hyper.batch_size as f64;
        loss *= inv_batch;
        grads.scale(inv_batch);
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("loss = {loss}") });
        }
        loss_history.push(loss);

        let frac = step as f64 / hyper.steps as f64;
        let lr = hyper.lr + (hyper.final_lr - hyper.lr) * frac;
        let delta = adam.update(&grads, hyper, step, lr);
        denoiser.net_mut().apply_update(&delta, 1.0);
    }

    Ok(TrainOutput { denoiser, loss_history })
}

/// Expected preconditioned loss of the trivial predictor `D(x) = x` under
/// the training sigma distribution: its residual is `sigma eps / c_out`,
/// so the mean loss is `d * (E[sigma^2] + sigma_data^2) / sigma_data^2`
/// with `E[sigma^2] = exp(2 pmean + 2 pstd^2)`.
pub fn identity_denoiser_baseline(data_dim: usize, sigma_data: f64, hyper: &Hyperparams) -> f64 {
    let e_sigma2 = (2.0 * hyper.sigma_pmean + 2.0 * hyper.sigma_pstd * hyper.sigma_pstd).exp();
    data_dim as f64 * (e_sigma2 + sigma_data * sigma_data) / (sigma_data * sigma_data)
}
