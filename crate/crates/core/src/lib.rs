//! Gaussian-process network inference.
//!
//! Node signals share a squared-exponential time kernel and are coupled
//! through a weighted directed network. The network is inferred with a
//! factorised variational posterior, and the marginal likelihood is evaluated
//! in `O(N³ + T³)` through a Kronecker eigendecomposition.
//!
//! Every numeric type is generic over [`Real`] (`f32` or `f64`). The `*64`
//! and `*32` aliases at the crate root fix the precision.

pub mod error;
pub mod eval;
pub mod kernel;
pub mod likelihood;
pub mod network;
pub mod rng;
pub mod scalar;
pub mod stability;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
pub use eval::{plant_instance, roc_auc, score_matrix, PlantedInstance, RocCurve};
pub use kernel::{chol_with_jitter, kernel_matrix, se_kernel, KernelConfig, TimeGrid};
pub use likelihood::{
    dense_covariance, log_det_kron, log_ml_kron, log_ml_kron_with_gradient, log_ml_naive,
    marginal_covariance_entry, LikelihoodGradient, ModelHyper, ObservationGrid,
};
pub use network::{
    hadamard_mask, sample_prior, simulate_observations, spectral_radius, NetworkParams, PriorConfig,
    StructuralMatrices,
};
pub use scalar::Real;
pub use stability::{run_audits, AuditConfig, AuditReport, SandwichBounds, SandwichCondition};
pub use trainer::{adam_step, fit, smoothed_elbo, AdamConfig, AdamState, FitReport, TrainConfig};
pub use variational::{
    draw_noise, elbo_estimate, elbo_from_noise, elbo_gradient, ElboContext, ElboEstimate, ElboGradient,
    NoiseDraw, TemperaturePair, VariationalState,
};

pub type KernelConfig64 = KernelConfig<f64>;
pub type KernelConfig32 = KernelConfig<f32>;
pub type TimeGrid64 = TimeGrid<f64>;
pub type TimeGrid32 = TimeGrid<f32>;
pub type NetworkParams64 = NetworkParams<f64>;
pub type NetworkParams32 = NetworkParams<f32>;
pub type PriorConfig64 = PriorConfig<f64>;
pub type PriorConfig32 = PriorConfig<f32>;
pub type ModelHyper64 = ModelHyper<f64>;
pub type ModelHyper32 = ModelHyper<f32>;
pub type ObservationGrid64 = ObservationGrid<f64>;
pub type ObservationGrid32 = ObservationGrid<f32>;
pub type VariationalState64 = VariationalState<f64>;
pub type VariationalState32 = VariationalState<f32>;
pub type PlantedInstance64 = PlantedInstance<f64>;
pub type PlantedInstance32 = PlantedInstance<f32>;
pub type AdamConfig64 = AdamConfig<f64>;
pub type AdamConfig32 = AdamConfig<f32>;
pub type TrainConfig64 = TrainConfig<f64>;
pub type TrainConfig32 = TrainConfig<f32>;
pub type FitReport64 = FitReport<f64>;
pub type FitReport32 = FitReport<f32>;
