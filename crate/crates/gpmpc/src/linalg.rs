//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

/// Force exact symmetry: (M + Mᵀ)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Largest absolute asymmetry |M - Mᵀ|.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigendecomposition of a symmetric matrix, returned as (eigenvalues, eigenvectors).
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let se = symmetrize(m).symmetric_eigen();
    (se.eigenvalues, se.eigenvectors)
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Symmetrize and clamp negative eigenvalues to zero.
///
/// Returns `Err(min_eig)` when an eigenvalue undershoots `-tol`, i.e. the
/// matrix is too indefinite to repair silently.
pub fn psd_clamp(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>, f64> {
    let (vals, vecs) = sym_eigen(m);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(min);
    }
    if min >= 0.0 {
        return Ok(symmetrize(m));
    }
    let clamped = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0)));
    Ok(reassemble(&clamped, &vecs))
}

/// Principal square root of a symmetric PSD matrix (eigenvalues clamped at zero).
pub fn principal_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let roots = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt()));
    reassemble(&roots, &vecs)
}

fn reassemble(vals: &DVector<f64>, vecs: &DMatrix<f64>) -> DMatrix<f64> {
    let scaled = vecs * DMatrix::from_diagonal(vals);
    symmetrize(&(scaled * vecs.transpose()))
}

/// Column-major vectorization.
pub fn vec_mat(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_mat`] for an n×n matrix.
pub fn unvec_mat(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}
