//! Gaussian-process dynamics model: squared-exponential regression over
//! state-control tuples with state-difference targets, plus prediction at
//! uncertain inputs via exact moment matching.

pub mod dataset;
pub mod kernel;
pub mod model;
pub(crate) mod moments;
pub mod propagate;
pub mod train;

pub use dataset::GpDataset;
pub use kernel::GpHyperparams;
pub use model::{GpDimension, GpModel};
pub use train::{train, TrainConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset rows disagree: {inputs} inputs vs {targets} targets")]
    RowMismatch { inputs: usize, targets: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("hyperparameter {0} must be strictly positive")]
    NonPositiveHyperparam(&'static str),
    #[error("Gram matrix is not positive definite (jitter escalation exhausted at {max_jitter:e})")]
    GramNotPositiveDefinite { max_jitter: f64 },
    #[error("training failed: {0}")]
    Training(String),
    #[error("input covariance is not positive semidefinite (min eigenvalue {0:e})")]
    InputCovNotPsd(f64),
    #[error("propagated covariance lost positive semidefiniteness (min eigenvalue {0:e})")]
    PropagatedCovNotPsd(f64),
    #[error("model file error: {0}")]
    Io(String),
}
