//! L1 weight-normalized networks with 1-path-norm capacity control.
//!
//! The crate covers:
//!
//! - [`linalg`]: dense row-major matrices, seeded RNG, orthogonal init and the
//!   operator norms used by the product bound.
//! - [`normalization`]: L1/L2 weight normalization, the L1-sphere projection,
//!   the CReLU paired projection and the blended pruning reparameterization,
//!   together with their vector-Jacobian products.
//! - [`pathnorm`]: the 1-path-norm family of Lipschitz bounds, a brute-force
//!   path enumeration oracle and an empirical Lipschitz probe.
//! - [`architectures`]: PSiLON MLPs and CReLU residual networks with forward
//!   and backward passes and JSON serialization.
//! - [`metrics`]: near-sparsity and exact sparsity.
//! - [`training`]: Adam, learning-rate schedules, regularizers, the pruning
//!   schedule and grid search.
//! - [`data`]: CSV ingestion, standardization, splits and synthetic tasks.

pub mod architectures;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod normalization;
pub mod pathnorm;
pub mod selftest;
pub mod training;

pub use architectures::{
    init_network, Activation, CReLUPairLinear, Lengths, NetSpec, Network, NetworkKind, NormSource,
    NormalizedLinear, OutNonlinearity, Trace,
};
pub use error::{Error, Result};
pub use linalg::{seeded_rng, Matrix, Rng};
pub use metrics::{near_sparsity, network_sparsity, SparsityReport};
pub use normalization::NormMode;
pub use pathnorm::PathNormReport;
pub use training::{train, LossKind, LrSchedule, MetricsRow, Regularizer, TrainPlan};
