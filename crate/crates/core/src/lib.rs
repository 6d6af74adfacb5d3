//! Gradient extraction from probability-flow ODE samplers via the adjoint
//! state method, with a finite-difference self-consistency harness.
//!
//! The pipeline: a [`velocity::VelocityField`] defines the flow, the
//! [`sampler`] integrates it from scaled noise down to a sample, a
//! [`quantity::QuantitySpec`] turns the sample into a scalar, and the
//! [`adjoint`] module integrates the augmented adjoint system (or chains
//! exact VJPs through the recorded steps) to produce the gradient of that
//! scalar with respect to the conditioning inputs. The [`consistency`]
//! module validates those gradients against the sampler's own output
//! differences; [`oracle`] provides the independent finite-difference and
//! closed-form ground truths the test suites compare against.

pub mod adjoint;
pub mod consistency;
pub mod error;
pub mod formats;
pub mod grid;
pub mod mlp;
pub mod noise;
pub mod oracle;
pub mod quantity;
pub mod sampler;
pub mod series;
pub mod state;
pub mod training;
pub mod velocity;

pub use adjoint::{
    adjoint_solve, batch_sensitivity, compute_sensitivity, discrete_adjoint, AdjointMode,
    AdjointOptions, AdjointState, BatchResult, GradientMode, RunMetadata, SeedPolicy,
    SensitivityResult,
};
pub use consistency::{linearized_delta, rmse, run_check, total_derivative, CheckRecord, CheckRun};
pub use error::{Error, Result};
pub use grid::{edm_time_grid, TimeGrid, DEFAULT_RHO, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN};
pub use mlp::{EdmPrecond, Mlp, MlpDenoiser};
pub use noise::gaussian_noise;
pub use quantity::QuantitySpec;
pub use sampler::{sample, Solver, Trajectory};
pub use series::{cadence_times, hours_to_days, ConditioningSeries};
pub use state::{Conditioning, GridMeta, Matrix, StateVector};
pub use training::{generate_dataset, train, Hyperparams, SyntheticTask, TrainArch, TrainOutput};
pub use velocity::{AnalyticGaussianField, Denoiser, EdmFlowField, VelocityField};
