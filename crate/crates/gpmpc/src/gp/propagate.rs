//! Uncertainty propagation.
pub struct GaussianState;
pub struct GaussianInput;
pub struct UncertainPrediction;
