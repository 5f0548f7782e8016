//! Squared-exponential covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::GpError;

/// Hyperparameters of one output dimension's GP.
///
/// The kernel is k(a, b) = σ_s² exp(-½ (a-b)ᵀ Λ (a-b)) with Λ the diagonal
/// `scales` matrix acting as the quadratic-form weight in the exponent.
/// Observation noise σ_n² enters once, on the Gram diagonal, never inside
/// the kernel itself.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GpHyperparams {
    pub signal_variance: f64,
    pub noise_variance: f64,
    /// Diagonal of Λ, one positive weight per input coordinate.
    pub scales: Vec<f64>,
}

impl GpHyperparams {
    pub fn new(signal_variance: f64, noise_variance: f64, scales: Vec<f64>) -> Result<Self, GpError> {
        let hp = Self { signal_variance, noise_variance, scales };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.signal_variance > 0.0) {
            return Err(GpError::NonPositiveHyperparam("signal_variance"));
        }
        if !(self.noise_variance > 0.0) {
            return Err(GpError::NonPositiveHyperparam("noise_variance"));
        }
        if self.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(GpError::NonPositiveHyperparam("scales"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.scales.len()
    }

    /// Λ as a diagonal matrix.
    pub fn scale_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.scales.clone()))
    }

    /// Λ⁻¹ as a diagonal matrix.
    pub fn inv_scale_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.scales.len(),
            self.scales.iter().map(|s| 1.0 / s),
        ))
    }
}

/// Noise-free squared-exponential covariance between two inputs.
pub fn se_kernel(a: &DVector<f64>, b: &DVector<f64>, hp: &GpHyperparams) -> Result<f64, GpError> {
    let d = hp.input_dim();
    if a.len() != d {
        return Err(GpError::DimensionMismatch { expected: d, got: a.len() });
    }
    if b.len() != d {
        return Err(GpError::DimensionMismatch { expected: d, got: b.len() });
    }
    let mut quad = 0.0;
    for i in 0..d {
        let diff = a[i] - b[i];
        quad += hp.scales[i] * diff * diff;
    }
    Ok(hp.signal_variance * (-0.5 * quad).exp())
}

/// Kernel vector k(X, x*) for each row of `rows` against a query point.
pub(crate) fn kernel_vector(rows: &DMatrix<f64>, query: &DVector<f64>, hp: &GpHyperparams) -> DVector<f64> {
    let d = rows.ncols();
    debug_assert_eq!(query.len(), d);
    DVector::from_iterator(
        rows.nrows(),
        (0..rows.nrows()).map(|i| {
            let mut quad = 0.0;
            for j in 0..d {
                let diff = rows[(i, j)] - query[j];
                quad += hp.scales[j] * diff * diff;
            }
            hp.signal_variance * (-0.5 * quad).exp()
        }),
    )
}

/// Noise-free kernel matrix K(X, X).
pub(crate) fn kernel_matrix(rows: &DMatrix<f64>, hp: &GpHyperparams) -> DMatrix<f64> {
    let n = rows.nrows();
    let d = rows.ncols();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.signal_variance;
        for j in 0..i {
            let mut quad = 0.0;
            for c in 0..d {
                let diff = rows[(i, c)] - rows[(j, c)];
                quad += hp.scales[c] * diff * diff;
            }
            let v = hp.signal_variance * (-0.5 * quad).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}
