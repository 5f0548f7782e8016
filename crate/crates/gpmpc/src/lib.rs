//! Learning-based model predictive control of unknown nonlinear systems.
//!
//! The crate learns a discrete-time plant as a set of Gaussian-process (GP)
//! regressors over state-control inputs with state-difference targets, then
//! controls it with two receding-horizon schemes:
//!
//! * **GPMPC1** — a trust-region SQP on the stochastic tracking problem,
//!   using mean-level linearizations of the GP dynamics refreshed by
//!   moment-matched rollouts.
//! * **GPMPC2** — a condensed convex QP over control increments built from an
//!   extended local model (mean plus covariance square root in the state),
//!   solved by a warm-started active-set method.
//!
//! Model uncertainty is propagated through the horizon by exact
//! moment matching for the squared-exponential kernel, and enters both
//! the cost (variance trace penalty) and the state constraints
//! (chance-constraint tightening).
//!
//! The `examples/` directory has one runnable program per capability; the
//! `gpmpc` binary wraps the experiment pipeline (`train`, `simulate`,
//! `compare`, `validate`).

pub mod experiment;
pub mod gp;
pub mod linalg;
pub mod linearize;
pub mod mpc;
pub mod plant;
pub mod qp;
pub mod sqp;

pub use gp::dataset::GpDataset;
pub use gp::kernel::GpHyperparams;
pub use gp::model::GpModel;
pub use gp::propagate::{GaussianInput, GaussianState, UncertainPrediction};
pub use linearize::{finite_diff_jacobian, BasicLocalModel, ExtendedLocalModel, ExtendedState};
pub use mpc::config::{MpcConfig, ReferenceTrajectory, TighteningMode};
pub use mpc::runner::{Plant, TrajectoryLog};
pub use qp::{QpProblem, QpSolution, WorkingSet};
pub use sqp::{NlpSpec, TrustRegionState};
