//! Online nonparametric estimation of multivariate Hawkes processes.
//!
//! A p-dimensional Hawkes process has conditional intensities
//!
//! ```text
//! lambda_i(t) = mu_i + sum_j sum_{tau_{j,n} < t} f_{i,j}(t - tau_{j,n})
//! ```
//!
//! where the triggering functions `f_{i,j}` are unknown. This crate
//! estimates the `mu_i` and `f_{i,j}` from a single event stream in one
//! online pass: time is cut into epochs no wider than `delta`, every epoch
//! contributes an instantaneous regularized negative log-likelihood term,
//! and each triggering function takes a functional gradient step in an
//! RKHS followed by a projection onto nonnegative functions and a budget
//! truncation. Triggering functions are represented as finite kernel
//! expansions throughout.
//!
//! The crate also provides an exact thinning simulator, a parametric
//! online baseline with exponential triggering functions, marked and
//! spatial process variants, evaluation metrics, and an experiment
//! harness behind the `hawkes-npole` binary. Library entry points are
//! deliberately small; the `examples/` directory has one runnable
//! program per capability.

pub mod baselines;
pub(crate) mod dict;
pub mod discretize;
pub mod extensions;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod npole;
pub mod process;
pub mod projection;
pub mod quad;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument left the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),
    /// Structurally invalid input data or configuration.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Input file could not be parsed; carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// A model was handed to an operation that does not support it.
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    /// Kernel variant not usable for the requested operation.
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),
    /// Simulated population exceeded the stationarity-based guard.
    #[error("explosion guard tripped: {0}")]
    Explosion(String),
    /// An enforced pass/fail gate did not hold.
    #[error("check failed: {0}")]
    CheckFailed(String),
    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
