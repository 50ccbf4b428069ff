//! Learning the effective (averaged) drift of a partially observed multiscale
//! stochastic system from a single slow-component trajectory.
//!
//! The library couples four pieces:
//!
//! - [`sde`]: simulation of slow/fast SDE systems, exact invariant-measure
//!   samplers for the benchmark models, and the brute-force averaged-drift
//!   oracle used as ground truth.
//! - [`tape`], [`mlp`], [`flow`]: a minimal reverse-mode differentiation core
//!   with multilayer perceptrons and affine coupling flows (exact
//!   log-determinants).
//! - [`likelihood`], [`train`], [`vi`]: the Euler-Maruyama log-likelihood,
//!   Monte-Carlo averaged drift under a flow pushforward, penalized
//!   maximum-likelihood training, and flow-based variational inference.
//! - [`metrics`], [`config`], [`experiment`]: evaluation (drift MSE grids,
//!   same-noise path comparison, finite-time law comparison) and the
//!   declarative experiment runner behind the CLI.
//!
//! Core numeric code is generic over the scalar type via [`scalar::Scalar`];
//! the pipeline layers run at [`Real`] (`f64`).

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod expr;
pub mod flow;
pub mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod reduce;
pub mod rng;
pub mod scalar;
pub mod sde;
pub mod tape;
pub mod traj;
pub mod train;
pub mod vi;

pub use error::Error;
pub use scalar::Scalar;

/// Scalar type used by the experiment pipeline and CLI.
pub type Real = f64;

/// Concrete aliases at the default precision.
pub type Trajectory = traj::Trajectory<Real>;
pub type CouplingFlow = flow::CouplingFlow<Real>;
pub type DriftKernel = kernel::DriftKernel<Real>;
pub type Sigma = linalg::Sigma<Real>;

/// Convenience result type for fallible library operations.
pub type Result<T> = std::result::Result<T, Error>;
