//! Multi-source unsupervised domain adaptation at desk scale.
//!
//! A shared feature extractor feeds one extractor/classifier branch per
//! labeled source. Training minimizes source cross-entropy, an MMD between
//! each source and the target in that source's own feature space, and the
//! disagreement of the branch classifiers on target samples.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, the default precision, with `*32` variants for `f32`.
//!
//! - [`autodiff`]: tensors and a tape-based reverse-mode graph.
//! - [`kernels`]: Gaussian mixture kernels and the two MMD estimators.
//! - [`model`]: network, losses and checkpoint container.
//! - [`data`]: tasks, synthetic generator, CSV/TOML I/O and samplers.
//! - [`trainer`]: schedules, SGD with momentum and resumable training.
//! - [`harness`]: method comparisons, reports, sweeps and embedding export.
//! - [`cli`]: the `mfsan` command.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod overrides;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Model = model::MfsanModel<f64>;
pub type Trainer = trainer::Trainer<f64>;
pub type KernelSpec = kernels::KernelSpec<f64>;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Model32 = model::MfsanModel<f32>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type KernelSpec32 = kernels::KernelSpec<f32>;
