//! JSON config schemas for the subcommands, plus resolution of field specs
//! into live velocity fields.
//!
//! Checkpoint fields read their architecture sidecar (`<path>.meta.json`,
//! written by `flowgrad train`) for the conditioning split, sigma_data and
//! scalar input scales; explicit config fields override it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowgrad_core::adjoint::{GradientMode, SeedPolicy};
use flowgrad_core::error::{Error, Result};
use flowgrad_core::formats;
use flowgrad_core::grid::{edm_time_grid, TimeGrid, DEFAULT_RHO, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN};
use flowgrad_core::mlp::{EdmPrecond, MlpDenoiser};
use flowgrad_core::quantity::QuantitySpec;
use flowgrad_core::sampler::Solver;
use flowgrad_core::state::{Conditioning, GridMeta, Matrix, StateVector};
use flowgrad_core::training::{GeneratorKind, Hyperparams, SyntheticTask, TrainArch};
use flowgrad_core::velocity::{AnalyticGaussianField, EdmFlowField, VelocityField};

pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Config(format!("config file not found: {}", path.display())));
    }
    formats::read_json(path).map_err(|e| Error::Config(e.to_string()))
}

// ---------------------------------------------------------------------
// shared pieces
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_steps() -> usize {
    128
}
fn default_sigma_min() -> f64 {
    DEFAULT_SIGMA_MIN
}
fn default_sigma_max() -> f64 {
    DEFAULT_SIGMA_MAX
}
fn default_rho() -> f64 {
    DEFAULT_RHO
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_steps: default_steps(),
            sigma_min: default_sigma_min(),
            sigma_max: default_sigma_max(),
            rho: default_rho(),
        }
    }
}

impl GridConfig {
    pub fn build(&self, steps_override: Option<usize>) -> Result<TimeGrid> {
        edm_time_grid(
            steps_override.unwrap_or(self.n_steps),
            self.sigma_min,
            self.sigma_max,
            self.rho,
        )
    }
}

/// A state vector in config form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSpec {
    pub data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_meta: Option<GridMeta>,
}

impl StateSpec {
    pub fn build(&self) -> Result<StateVector> {
        let shape = self.shape.clone().unwrap_or_else(|| vec![self.data.len()]);
        let sv = StateVector::new(self.data.clone(), shape)?;
        match &self.grid_meta {
            Some(meta) => sv.with_grid_meta(meta.clone()),
            None => Ok(sv),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditioningSpec {
    pub c: StateSpec,
    #[serde(default)]
    pub scalars: Vec<(String, f64)>,
}

impl ConditioningSpec {
    pub fn build(&self) -> Result<Conditioning> {
        Conditioning::new(self.c.build()?, self.scalars.clone())
    }
}

/// Scalar conditioner declaration for checkpoint fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarDecl {
    pub name: String,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

/// Architecture sidecar written next to each checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub state_dim: usize,
    pub cond_dim: usize,
    pub sigma_data: f64,
    pub widths: Vec<usize>,
    pub scalars: Vec<ScalarDecl>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec {
    /// Closed-form linear Gaussian field: `u = t (x - M c) / (s^2 + t^2)`.
    Analytic {
        /// Row-major mean map, one row per state component.
        matrix: Vec<Vec<f64>>,
        noise_std: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cond_shape: Option<Vec<usize>>,
    },
    /// EDM-wrapped MLP denoiser loaded from an FGV1 checkpoint.
    Checkpoint {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma_data: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cond_dim: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scalars: Option<Vec<ScalarDecl>>,
        /// Reinterpret the conditioning as a grid of this shape.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cond_shape: Option<Vec<usize>>,
    },
}

/// A loaded field ready for dispatch.
pub enum ResolvedField {
    Analytic(AnalyticGaussianField),
    Mlp(Box<EdmFlowField<MlpDenoiser>>),
}

impl ResolvedField {
    pub fn as_dyn(&self) -> &(dyn VelocityField + Sync) {
        match self {
            ResolvedField::Analytic(f) => f,
            ResolvedField::Mlp(f) => f.as_ref(),
        }
    }

    /// The closed-form pieces, when the field has them.
    pub fn analytic(&self) -> Option<&AnalyticGaussianField> {
        match self {
            ResolvedField::Analytic(f) => Some(f),
            ResolvedField::Mlp(_) => None,
        }
    }
}

impl FieldSpec {
    pub fn resolve(&self, config_dir: &Path) -> Result<ResolvedField> {
        match self {
            FieldSpec::Analytic { matrix, noise_std, cond_shape } => {
                let rows = matrix.len();
                if rows == 0 || matrix.iter().any(|r| r.len() != matrix[0].len()) {
                    return Err(Error::Config("analytic matrix must be rectangular".into()));
                }
                let cols = matrix[0].len();
                let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
                let mut field =
                    AnalyticGaussianField::new(Matrix::new(rows, cols, flat)?, *noise_std)?;
                if let Some(shape) = cond_shape {
                    field = field.with_cond_shape(shape.clone())?;
                }
                Ok(ResolvedField::Analytic(field))
            }
            FieldSpec::Checkpoint { path, sigma_data, cond_dim, scalars, cond_shape } => {
                let path = if path.is_relative() { config_dir.join(path) } else { path.clone() };
                let net = formats::load_mlp(&path)?;
                let sidecar = formats::sidecar_path(&path);
                let meta: Option<CheckpointMeta> =
                    if sidecar.exists() { Some(formats::read_json(&sidecar)?) } else { None };

                let sigma_data = sigma_data
                    .or(meta.as_ref().map(|m| m.sigma_data))
                    .unwrap_or(0.5);
                let scalar_decls: Vec<ScalarDecl> = scalars
                    .clone()
                    .or_else(|| meta.as_ref().map(|m| m.scalars.clone()))
                    .unwrap_or_default();
                let state_dim = net.output_dim();
                let cond_dim = cond_dim.or(meta.as_ref().map(|m| m.cond_dim)).unwrap_or_else(|| {
                    // whatever the input width leaves after state, noise
                    // level and scalar features
                    net.input_dim().saturating_sub(state_dim + 1 + scalar_decls.len())
                });
                let scales: Vec<f64> = scalar_decls.iter().map(|s| s.scale).collect();
                let denoiser = MlpDenoiser::new(
                    net,
                    EdmPrecond { sigma_data },
                    state_dim,
                    cond_dim,
                    scales,
                )?;
                let mut field = EdmFlowField::new(denoiser);
                if let Some(shape) = cond_shape {
                    field = field.with_shapes(vec![state_dim], shape.clone())?;
                }
                Ok(ResolvedField::Mlp(Box::new(field)))
            }
        }
    }
}

/// Scalar conditioner names declared for a checkpoint, in order.
pub fn scalar_names(spec: &FieldSpec, config_dir: &Path) -> Result<Vec<String>> {
    match spec {
        FieldSpec::Analytic { .. } => Ok(vec![]),
        FieldSpec::Checkpoint { path, scalars, .. } => {
            if let Some(s) = scalars {
                return Ok(s.iter().map(|d| d.name.clone()).collect());
            }
            let path = if path.is_relative() { config_dir.join(path) } else { path.clone() };
            let sidecar = formats::sidecar_path(&path);
            if sidecar.exists() {
                let meta: CheckpointMeta = formats::read_json(&sidecar)?;
                Ok(meta.scalars.iter().map(|d| d.name.clone()).collect())
            } else {
                Ok(vec![])
            }
        }
    }
}

// ---------------------------------------------------------------------
// training configs
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GeneratorConfig {
    ConditionalGaussian,
    ConditionalMixture { weight: f64, offset_a: Vec<f64>, offset_b: Vec<f64>, std_b: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub mean_matrix: Vec<Vec<f64>>,
    pub noise_std: f64,
    #[serde(default = "default_generator")]
    pub generator: GeneratorConfig,
    #[serde(default = "default_cond_low")]
    pub cond_low: f64,
    #[serde(default = "default_cond_high")]
    pub cond_high: f64,
    #[serde(default)]
    pub scalar_ranges: Vec<(f64, f64)>,
    pub n_samples: usize,
    pub seed: u64,
}

fn default_generator() -> GeneratorConfig {
    GeneratorConfig::ConditionalGaussian
}
fn default_cond_low() -> f64 {
    -1.0
}
fn default_cond_high() -> f64 {
    1.0
}

impl TaskConfig {
    pub fn build(&self) -> Result<SyntheticTask> {
        if self.mean_matrix.len() != self.data_dim
            || self.mean_matrix.iter().any(|r| r.len() != self.cond_dim)
        {
            return Err(Error::Config("mean_matrix shape must be data_dim x cond_dim".into()));
        }
        let flat: Vec<f64> = self.mean_matrix.iter().flatten().copied().collect();
        let task = SyntheticTask {
            data_dim: self.data_dim,
            cond_dim: self.cond_dim,
            mean_map: Matrix::new(self.data_dim, self.cond_dim, flat)?,
            noise_std: self.noise_std,
            kind: match &self.generator {
                GeneratorConfig::ConditionalGaussian => GeneratorKind::ConditionalGaussian,
                GeneratorConfig::ConditionalMixture { weight, offset_a, offset_b, std_b } => {
                    GeneratorKind::ConditionalMixture {
                        weight: *weight,
                        offset_a: offset_a.clone(),
                        offset_b: offset_b.clone(),
                        std_b: *std_b,
                    }
                }
            },
            cond_low: self.cond_low,
            cond_high: self.cond_high,
            scalar_ranges: self.scalar_ranges.clone(),
            n_samples: self.n_samples,
            seed: self.seed,
        };
        task.validate()?;
        Ok(task)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_sigma_data")]
    pub sigma_data: f64,
    #[serde(default)]
    pub scalar_names: Vec<String>,
    #[serde(default)]
    pub scalar_scales: Vec<f64>,
}

fn default_sigma_data() -> f64 {
    0.5
}

impl ArchConfig {
    pub fn build(&self) -> Result<TrainArch> {
        if self.scalar_names.len() != self.scalar_scales.len() {
            return Err(Error::Config("scalar_names and scalar_scales must pair up".into()));
        }
        Ok(TrainArch {
            hidden: self.hidden.clone(),
            sigma_data: self.sigma_data,
            scalar_scales: self.scalar_scales.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_lr: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_pmean")]
    pub sigma_pmean: f64,
    #[serde(default = "default_pstd")]
    pub sigma_pstd: f64,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
    #[serde(default = "default_batch_seed")]
    pub batch_seed: u64,
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    2e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_pmean() -> f64 {
    -1.2
}
fn default_pstd() -> f64 {
    1.2
}
fn default_init_seed() -> u64 {
    1
}
fn default_batch_seed() -> u64 {
    2
}

impl HyperConfig {
    pub fn build(&self, steps_override: Option<usize>) -> Hyperparams {
        Hyperparams {
            steps: steps_override.unwrap_or(self.steps),
            batch_size: self.batch_size,
            lr: self.lr,
            final_lr: self.final_lr.unwrap_or(self.lr / 10.0),
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            sigma_pmean: self.sigma_pmean,
            sigma_pstd: self.sigma_pstd,
            init_seed: self.init_seed,
            batch_seed: self.batch_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskConfig,
    pub arch: ArchConfig,
    pub hyper: HyperConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------
// run configs
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleConfig {
    pub field: FieldSpec,
    pub conditioning: ConditioningSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_solver")]
    pub solver: Solver,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub store: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

pub fn default_solver() -> Solver {
    Solver::Heun
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradConfig {
    pub field: FieldSpec,
    pub conditioning: ConditioningSpec,
    pub quantity: QuantitySpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_solver")]
    pub solver: Solver,
    #[serde(default = "default_mode")]
    pub mode: GradientMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

pub fn default_mode() -> GradientMode {
    GradientMode::Stored
}

/// Evaluation times for series-driven runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSpec {
    Cadence { start: f64, end: f64, cadence_hours: f64 },
    List { list: Vec<f64> },
}

impl TauSpec {
    pub fn times(&self) -> Result<Vec<f64>> {
        match self {
            TauSpec::Cadence { start, end, cadence_hours } => {
                flowgrad_core::series::cadence_times(
                    *start,
                    *end,
                    flowgrad_core::series::hours_to_days(*cadence_hours),
                )
            }
            TauSpec::List { list } => {
                if list.len() < 2 {
                    return Err(Error::Config("tau list needs at least two times".into()));
                }
                Ok(list.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckConfig {
    pub field: FieldSpec,
    pub quantity: QuantitySpec,
    pub series_csv: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_meta: Option<PathBuf>,
    pub taus: TauSpec,
    /// Name under which tau feeds the model's scalar conditioners.
    #[serde(default = "default_tau_name")]
    pub tau_name: String,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_solver")]
    pub solver: Solver,
    #[serde(default = "default_discrete")]
    pub mode: GradientMode,
    #[serde(default)]
    pub seed: u64,
    /// Optional amplitude sweep: the walk around the first entry is scaled
    /// by each factor and summarized separately.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude_sweep: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_tau_name() -> String {
    "tau".into()
}
pub fn default_discrete() -> GradientMode {
    GradientMode::Discrete
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    None,
    Month,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapConfig {
    pub field: FieldSpec,
    pub quantity: QuantitySpec,
    /// Conditioning list: either series-driven or explicit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_meta: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taus: Option<TauSpec>,
    #[serde(default = "default_tau_name")]
    pub tau_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditionings: Option<Vec<ConditioningSpec>>,
    #[serde(default)]
    pub grouping: Grouping,
    pub seed_policy: SeedPolicy,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_solver")]
    pub solver: Solver,
    #[serde(default = "default_mode")]
    pub mode: GradientMode,
    #[serde(default)]
    pub pgm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub field: FieldSpec,
    #[serde(default = "default_verify_quantity")]
    pub quantity: QuantitySpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_solver")]
    pub solver: Solver,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_directions")]
    pub n_directions: usize,
    #[serde(default)]
    pub eps_sweep: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_verify_quantity() -> QuantitySpec {
    QuantitySpec::WeightedGlobalMean { lat_weighted: false, channel: None }
}
fn default_directions() -> usize {
    20
}

/// Month index (1-12) of a continuous day-of-year tau, no-leap calendar,
/// wrapping across years.
pub fn month_of_tau(tau: f64) -> usize {
    const CUM: [f64; 13] =
        [0.0, 31.0, 59.0, 90.0, 120.0, 151.0, 181.0, 212.0, 243.0, 273.0, 304.0, 334.0, 365.0];
    let day = tau.rem_euclid(365.0);
    for m in 0..12 {
        if day < CUM[m + 1] {
            return m + 1;
        }
    }
    12
}
