//! Multi-task training toolkit built around gradient-magnitude balancing.
//!
//! The core pieces:
//!
//! - [`autodiff`]: a dense-array reverse-mode tape sufficient for the
//!   shared-bottom recommendation network, with finite-difference checking.
//! - [`balance`]: MetaBalance — per-group, per-iteration rescaling of
//!   auxiliary gradient magnitudes toward the target task's magnitude —
//!   plus direction- and loss-weight-based baselines behind one interface.
//! - [`model`]: the two-branch (matrix factorization + MLP) multi-task
//!   network with per-task towers.
//! - [`optim`]: SGD, Adam, Adagrad, and RMSProp update rules, decoupled
//!   from balancing.
//! - [`data`]: ingestion, count filtering, target splitting with auxiliary
//!   merge and leakage removal, negative sampling, and a synthetic
//!   multi-behavior generator.
//! - [`eval`]: top-K ranking metrics (NDCG, recall, precision).
//!
//! The numeric core is generic over the scalar type via [`Scalar`]; the
//! aliases below pin the shipped toolchain to `f64`.

#![forbid(unsafe_code)]

pub mod autodiff;
pub mod balance;
pub mod data;
pub mod error;
pub mod eval;
pub mod grads;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar width used by the shipped training stack.
pub type Real = f64;

pub type Tensor = tensor::Tensor<Real>;
pub type ParameterGroup = params::ParameterGroup<Real>;
pub type GradientSet = grads::GradientSet<Real>;
pub type Tape = autodiff::Tape<Real>;
pub type MultiTaskModel = model::MultiTaskModel<Real>;
pub type TaskLosses = model::TaskLosses<Real>;
pub type Batch = data::Batch<Real>;
pub type MetaBalance = balance::MetaBalance<Real>;
pub type MagnitudeState = balance::MagnitudeState<Real>;
pub type BalanceReport = balance::BalanceReport<Real>;
pub type Optimizer = optim::Optimizer<Real>;

pub use balance::{Balancer, BalancerConfig, StepContext, Strategy};
pub use model::{Mode, ModelConfig};
pub use optim::Rule;
pub use params::Scope;
