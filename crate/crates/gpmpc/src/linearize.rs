//! Local linearization.
pub struct BasicLocalModel;
pub struct ExtendedState;
pub struct ExtendedLocalModel;
pub fn finite_diff_jacobian() {}
