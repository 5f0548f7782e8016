//! Per-output-dimension GP regression with cached Gram factorizations.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::kernel::{kernel_matrix, kernel_vector, se_kernel};
use super::{GpDataset, GpError, GpHyperparams};

/// K_σ = K(X, X) + σ_n² I.
pub fn gram_matrix(dataset: &GpDataset, hp: &GpHyperparams) -> DMatrix<f64> {
    let mut k = kernel_matrix(&dataset.inputs, hp);
    for i in 0..k.nrows() {
        k[(i, i)] += hp.noise_variance;
    }
    k
}

/// Cholesky of the Gram matrix with escalating diagonal jitter.
///
/// Starts at 1e-10·mean(diag) and multiplies by 10 until 1e-6·mean(diag);
/// past that the matrix is reported as not positive definite.
pub(crate) fn gram_cholesky(gram: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    if let Some(ch) = gram.clone().cholesky() {
        return Ok((ch, 0.0));
    }
    let mean_diag = gram.diagonal().mean();
    let mut jitter = 1e-10 * mean_diag;
    let cap = 1e-6 * mean_diag;
    while jitter <= cap {
        let mut k = gram.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += jitter;
        }
        if let Some(ch) = k.cholesky() {
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
    }
    Err(GpError::GramNotPositiveDefinite { max_jitter: cap })
}

/// Log marginal likelihood of one output dimension:
/// -½ yᵀK_σ⁻¹y - ½ log|K_σ| - (D/2) log 2π.
pub fn log_marginal_likelihood(dataset: &GpDataset, hp: &GpHyperparams, dim: usize) -> Result<f64, GpError> {
    hp.validate()?;
    if hp.input_dim() != dataset.input_dim() {
        return Err(GpError::DimensionMismatch { expected: dataset.input_dim(), got: hp.input_dim() });
    }
    let gram = gram_matrix(dataset, hp);
    let (chol, _) = gram_cholesky(&gram)?;
    let y = dataset.target_column(dim);
    let alpha = chol.solve(&y);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let d = dataset.len() as f64;
    Ok(-0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

/// Gradient of [`log_marginal_likelihood`] w.r.t. the log-hyperparameters
/// (log σ_s², log σ_n², log Λ_11, ..), using
/// ∂L/∂θ = ½ tr((ααᵀ - K⁻¹) ∂K/∂θ).
pub fn log_marginal_likelihood_grad(
    dataset: &GpDataset,
    hp: &GpHyperparams,
    dim: usize,
) -> Result<DVector<f64>, GpError> {
    let d_rows = dataset.len();
    let gram = gram_matrix(dataset, hp);
    let (chol, _) = gram_cholesky(&gram)?;
    let y = dataset.target_column(dim);
    let alpha = chol.solve(&y);
    let k_inv = chol.inverse();
    // A = ααᵀ - K⁻¹; gradient per parameter is ½ Σ_ij A_ij (∂K/∂θ)_ij.
    let a = &alpha * alpha.transpose() - k_inv;
    let kernel_part = {
        let mut k = gram.clone();
        for i in 0..d_rows {
            k[(i, i)] -= hp.noise_variance;
        }
        k
    };

    let n_scales = hp.input_dim();
    let mut grad = DVector::zeros(2 + n_scales);
    // ∂K/∂log σ_s² = noise-free kernel matrix.
    grad[0] = 0.5 * a.iter().zip(kernel_part.iter()).map(|(ai, ki)| ai * ki).sum::<f64>();
    // ∂K/∂log σ_n² = σ_n² I.
    grad[1] = 0.5 * hp.noise_variance * a.diagonal().sum();
    // ∂K/∂log Λ_cc = K ∘ (-½ Λ_cc (x_ic - x_jc)²).
    for c in 0..n_scales {
        let mut acc = 0.0;
        for i in 0..d_rows {
            for j in 0..d_rows {
                let diff = dataset.inputs[(i, c)] - dataset.inputs[(j, c)];
                acc += a[(i, j)] * kernel_part[(i, j)] * (-0.5 * hp.scales[c] * diff * diff);
            }
        }
        grad[2 + c] = 0.5 * acc;
    }
    Ok(grad)
}

/// Cached per-dimension factorization state.
#[derive(Debug, Clone)]
pub struct GpDimension {
    pub hyperparams: GpHyperparams,
    /// Lower-triangular Cholesky factor of K_σ.
    pub gram_chol: DMatrix<f64>,
    /// K_σ⁻¹ y for this dimension's targets.
    pub alpha: DVector<f64>,
    /// Explicit K_σ⁻¹ (needed by the uncertain-input trace terms).
    pub gram_inv: DMatrix<f64>,
}

/// Trained multi-output GP: independent outputs sharing one input set.
///
/// Immutable after construction; prediction from many threads is safe.
#[derive(Debug, Clone)]
pub struct GpModel {
    dataset: Arc<GpDataset>,
    dims: Vec<GpDimension>,
}

impl GpModel {
    /// Build the cached factorizations for the given hyperparameters.
    pub fn from_hyperparams(dataset: GpDataset, per_dim: Vec<GpHyperparams>) -> Result<Self, GpError> {
        if per_dim.len() != dataset.output_dim() {
            return Err(GpError::DimensionMismatch { expected: dataset.output_dim(), got: per_dim.len() });
        }
        let mut dims = Vec::with_capacity(per_dim.len());
        for (d, hp) in per_dim.into_iter().enumerate() {
            hp.validate()?;
            if hp.input_dim() != dataset.input_dim() {
                return Err(GpError::DimensionMismatch { expected: dataset.input_dim(), got: hp.input_dim() });
            }
            let gram = gram_matrix(&dataset, &hp);
            let (chol, _) = gram_cholesky(&gram)?;
            let y = dataset.target_column(d);
            let alpha = chol.solve(&y);
            let gram_inv = chol.inverse();
            dims.push(GpDimension { hyperparams: hp, gram_chol: chol.l(), alpha, gram_inv });
        }
        Ok(Self { dataset: Arc::new(dataset), dims })
    }

    pub fn dataset(&self) -> &GpDataset {
        &self.dataset
    }

    pub fn dims(&self) -> &[GpDimension] {
        &self.dims
    }

    /// Number of output dimensions (state dimension n).
    pub fn output_dim(&self) -> usize {
        self.dims.len()
    }

    /// Input dimension n+m.
    pub fn input_dim(&self) -> usize {
        self.dataset.input_dim()
    }

    /// Control dimension m.
    pub fn control_dim(&self) -> usize {
        self.input_dim() - self.output_dim()
    }

    /// Predictive mean and variance of the state difference at a known input.
    ///
    /// Variance is clamped at zero from below.
    pub fn predict_deterministic(&self, input: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), GpError> {
        if input.len() != self.input_dim() {
            return Err(GpError::DimensionMismatch { expected: self.input_dim(), got: input.len() });
        }
        let n = self.output_dim();
        let mut mean = DVector::zeros(n);
        let mut var = DVector::zeros(n);
        for (d, dim) in self.dims.iter().enumerate() {
            let k_star = kernel_vector(&self.dataset.inputs, input, &dim.hyperparams);
            mean[d] = k_star.dot(&dim.alpha);
            let k_self = se_kernel(input, input, &dim.hyperparams)?;
            let v = k_self - (&dim.gram_inv * &k_star).dot(&k_star);
            var[d] = v.max(0.0);
        }
        Ok((mean, var))
    }

    /// Mean squared error of one-step predictions against the training targets.
    pub fn training_mse(&self) -> Result<DVector<f64>, GpError> {
        let n = self.output_dim();
        let mut acc = DVector::zeros(n);
        for i in 0..self.dataset.len() {
            let (mean, _) = self.predict_deterministic(&self.dataset.input_row(i))?;
            for d in 0..n {
                let e = mean[d] - self.dataset.targets[(i, d)];
                acc[d] += e * e;
            }
        }
        Ok(acc / self.dataset.len() as f64)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), GpError> {
        let file = ModelFile::from_model(self);
        let json = serde_json::to_string_pretty(&file).map_err(|e| GpError::Io(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| GpError::Io(e.to_string()))
    }

    pub fn load_json(path: &Path) -> Result<Self, GpError> {
        let text = std::fs::read_to_string(path).map_err(|e| GpError::Io(e.to_string()))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| GpError::Io(e.to_string()))?;
        file.into_model()
    }
}

/// On-disk model layout: hyperparameters per dimension plus the dataset as
/// row-major arrays. Factorizations are rebuilt on load.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    dims: usize,
    input_dim: usize,
    hyperparams: Vec<GpHyperparams>,
    dataset_inputs: Vec<Vec<f64>>,
    dataset_targets: Vec<Vec<f64>>,
}

impl ModelFile {
    fn from_model(m: &GpModel) -> Self {
        let ds = m.dataset();
        Self {
            dims: m.output_dim(),
            input_dim: m.input_dim(),
            hyperparams: m.dims.iter().map(|d| d.hyperparams.clone()).collect(),
            dataset_inputs: (0..ds.len()).map(|i| ds.inputs.row(i).iter().cloned().collect()).collect(),
            dataset_targets: (0..ds.len()).map(|i| ds.targets.row(i).iter().cloned().collect()).collect(),
        }
    }

    fn into_model(self) -> Result<GpModel, GpError> {
        let rows = self.dataset_inputs.len();
        let flat_in: Vec<f64> = self.dataset_inputs.into_iter().flatten().collect();
        let flat_out: Vec<f64> = self.dataset_targets.into_iter().flatten().collect();
        if flat_in.len() != rows * self.input_dim || flat_out.len() != rows * self.dims {
            return Err(GpError::Io("model file has ragged dataset arrays".into()));
        }
        let dataset = GpDataset::new(
            DMatrix::from_row_slice(rows, self.input_dim, &flat_in),
            DMatrix::from_row_slice(rows, self.dims, &flat_out),
        )?;
        GpModel::from_hyperparams(dataset, self.hyperparams)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn toy_dataset(rng: &mut StdRng, rows: usize, n_in: usize, n_out: usize) -> GpDataset {
        let inputs = DMatrix::from_fn(rows, n_in, |_, _| rng.gen_range(-2.0..2.0));
        let targets = DMatrix::from_fn(rows, n_out, |_, _| rng.gen_range(-1.0..1.0));
        GpDataset::new(inputs, targets).unwrap()
    }

    #[test]
    fn gram_single_point() {
        // D=1, σ_s²=1, σ_n²=1: K(x,x) = 1 plus noise on the diagonal.
        let ds = GpDataset::new(DMatrix::from_row_slice(1, 1, &[0.7]), DMatrix::zeros(1, 1)).unwrap();
        let hp = GpHyperparams::new(1.0, 1.0, vec![1.0]).unwrap();
        let k = gram_matrix(&ds, &hp);
        assert_relative_eq!(k[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn duplicate_rows_without_noise_are_singular_at_factorization() {
        let ds = GpDataset::new(
            DMatrix::from_row_slice(2, 1, &[0.5, 0.5]),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let hp = GpHyperparams { signal_variance: 1.0, noise_variance: 0.0, scales: vec![1.0] };
        let gram = gram_matrix(&ds, &hp);
        // The plain factorization surfaces the rank deficiency; any positive
        // jitter then makes the PSD matrix definite again, which is what the
        // escalation policy relies on.
        assert!(gram.clone().cholesky().is_none());
        assert!(gram_cholesky(&gram).is_ok());
    }

    #[test]
    fn gram_min_eigenvalue_at_least_noise() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..5 {
            let ds = toy_dataset(&mut rng, 6, 3, 1);
            let hp = GpHyperparams::new(1.3, 0.05, vec![0.8, 1.1, 0.5]).unwrap();
            let gram = gram_matrix(&ds, &hp);
            let min_eig = crate::linalg::min_eigenvalue(&gram);
            assert!(min_eig >= hp.noise_variance - 1e-10, "min eig {min_eig}");
        }
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let mut rng = StdRng::seed_from_u64(8);
        let ds = toy_dataset(&mut rng, 8, 2, 1);
        let hp = GpHyperparams::new(0.9, 0.01, vec![1.0, 2.0]).unwrap();
        let gram = gram_matrix(&ds, &hp);
        assert_eq!(crate::linalg::max_asymmetry(&gram), 0.0);
    }

    #[test]
    fn likelihood_hand_value() {
        // y = 0, K_σ = [[2]], D = 1: -½ ln 2 - ½ ln 2π.
        let ds = GpDataset::new(DMatrix::from_row_slice(1, 1, &[0.0]), DMatrix::zeros(1, 1)).unwrap();
        let hp = GpHyperparams::new(1.0, 1.0, vec![1.0]).unwrap();
        let ll = log_marginal_likelihood(&ds, &hp, 0).unwrap();
        assert_relative_eq!(ll, -1.26551, epsilon = 1e-5);
    }

    #[test]
    fn likelihood_zero_targets_is_pure_determinant() {
        let mut rng = StdRng::seed_from_u64(3);
        let inputs = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
        let ds = GpDataset::new(inputs, DMatrix::zeros(5, 1)).unwrap();
        let hp = GpHyperparams::new(1.5, 0.3, vec![1.0, 1.0]).unwrap();
        let gram = gram_matrix(&ds, &hp);
        let expected = -0.5 * gram.determinant().ln() - 2.5 * (2.0 * std::f64::consts::PI).ln();
        let ll = log_marginal_likelihood(&ds, &hp, 0).unwrap();
        assert_relative_eq!(ll, expected, epsilon = 1e-10);
    }

    #[test]
    fn likelihood_matches_dense_inverse() {
        let mut rng = StdRng::seed_from_u64(4);
        let ds = toy_dataset(&mut rng, 5, 2, 1);
        let hp = GpHyperparams::new(1.2, 0.2, vec![0.7, 1.4]).unwrap();
        let gram = gram_matrix(&ds, &hp);
        let inv = gram.clone().try_inverse().unwrap();
        let y = ds.target_column(0);
        let expected = -0.5 * y.dot(&(&inv * &y))
            - 0.5 * gram.determinant().ln()
            - 0.5 * ds.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        let got = log_marginal_likelihood(&ds, &hp, 0).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-8, max_relative = 1e-8);
    }

    #[test]
    fn likelihood_grad_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let ds = toy_dataset(&mut rng, 6, 2, 1);
        let hp = GpHyperparams::new(0.8, 0.15, vec![1.1, 0.6]).unwrap();
        let grad = log_marginal_likelihood_grad(&ds, &hp, 0).unwrap();

        let theta0 = [
            hp.signal_variance.ln(),
            hp.noise_variance.ln(),
            hp.scales[0].ln(),
            hp.scales[1].ln(),
        ];
        let eval = |theta: &[f64]| {
            let hp = GpHyperparams::new(theta[0].exp(), theta[1].exp(), vec![theta[2].exp(), theta[3].exp()]).unwrap();
            log_marginal_likelihood(&ds, &hp, 0).unwrap()
        };
        let h = 1e-6;
        for p in 0..4 {
            let mut up = theta0;
            up[p] += h;
            let mut dn = theta0;
            dn[p] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            assert_relative_eq!(grad[p], fd, epsilon = 1e-6, max_relative = 1e-4);
        }
    }

    #[test]
    fn zero_targets_predict_zero_mean() {
        let mut rng = StdRng::seed_from_u64(6);
        let inputs = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-2.0..2.0));
        let ds = GpDataset::new(inputs, DMatrix::zeros(6, 2)).unwrap();
        let hp = GpHyperparams::new(1.0, 0.1, vec![1.0, 1.0, 1.0]).unwrap();
        let model = GpModel::from_hyperparams(ds, vec![hp.clone(), hp]).unwrap();
        let (mean, _) = model.predict_deterministic(&DVector::from_vec(vec![0.3, -0.4, 1.0])).unwrap();
        assert!(mean.amax() < 1e-14);
    }

    #[test]
    fn interpolates_training_point_as_noise_vanishes() {
        let mut rng = StdRng::seed_from_u64(9);
        let ds = toy_dataset(&mut rng, 5, 2, 1);
        let hp = GpHyperparams::new(1.0, 1e-10, vec![1.0, 1.0]).unwrap();
        let model = GpModel::from_hyperparams(ds.clone(), vec![hp]).unwrap();
        let (mean, var) = model.predict_deterministic(&ds.input_row(2)).unwrap();
        assert_relative_eq!(mean[0], ds.targets[(2, 0)], epsilon = 1e-4);
        assert!(var[0] < 1e-6);
    }

    #[test]
    fn prediction_matches_dense_solve_oracle() {
        let mut rng = StdRng::seed_from_u64(10);
        let ds = toy_dataset(&mut rng, 4, 3, 2);
        let hps = vec![
            GpHyperparams::new(1.1, 0.2, vec![0.9, 1.3, 0.4]).unwrap(),
            GpHyperparams::new(0.7, 0.05, vec![1.0, 0.8, 1.6]).unwrap(),
        ];
        let model = GpModel::from_hyperparams(ds.clone(), hps.clone()).unwrap();
        let query = DVector::from_vec(vec![0.2, -0.7, 1.1]);
        let (mean, var) = model.predict_deterministic(&query).unwrap();

        for d in 0..2 {
            let gram = gram_matrix(&ds, &hps[d]);
            let inv = gram.try_inverse().unwrap();
            let k_star = DVector::from_iterator(
                ds.len(),
                (0..ds.len()).map(|i| se_kernel(&ds.input_row(i), &query, &hps[d]).unwrap()),
            );
            let y = ds.target_column(d);
            let m_expect = k_star.dot(&(&inv * &y));
            let v_expect = hps[d].signal_variance - k_star.dot(&(&inv * &k_star));
            assert_relative_eq!(mean[d], m_expect, epsilon = 1e-10, max_relative = 1e-8);
            assert_relative_eq!(var[d], v_expect, epsilon = 1e-10, max_relative = 1e-8);
        }
    }

    #[test]
    fn predictions_invariant_to_row_permutation() {
        let mut rng = StdRng::seed_from_u64(11);
        let ds = toy_dataset(&mut rng, 7, 2, 1);
        let hp = GpHyperparams::new(1.0, 0.1, vec![1.2, 0.8]).unwrap();
        let perm: Vec<usize> = vec![3, 0, 6, 1, 5, 2, 4];
        let ds_perm = GpDataset::new(
            DMatrix::from_fn(7, 2, |i, j| ds.inputs[(perm[i], j)]),
            DMatrix::from_fn(7, 1, |i, j| ds.targets[(perm[i], j)]),
        )
        .unwrap();
        let m1 = GpModel::from_hyperparams(ds, vec![hp.clone()]).unwrap();
        let m2 = GpModel::from_hyperparams(ds_perm, vec![hp]).unwrap();
        let q = DVector::from_vec(vec![0.4, -0.2]);
        let (mu1, v1) = m1.predict_deterministic(&q).unwrap();
        let (mu2, v2) = m2.predict_deterministic(&q).unwrap();
        assert_relative_eq!(mu1[0], mu2[0], epsilon = 1e-10);
        assert_relative_eq!(v1[0], v2[0], epsilon = 1e-10);
    }

    #[test]
    fn json_roundtrip_preserves_predictions() {
        let mut rng = StdRng::seed_from_u64(12);
        let ds = toy_dataset(&mut rng, 6, 3, 2);
        let hps = vec![
            GpHyperparams::new(1.0, 0.1, vec![1.0, 0.5, 2.0]).unwrap(),
            GpHyperparams::new(2.0, 0.01, vec![0.3, 1.5, 1.0]).unwrap(),
        ];
        let model = GpModel::from_hyperparams(ds, hps).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_json(&path).unwrap();
        let back = GpModel::load_json(&path).unwrap();
        let q = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let (m1, v1) = model.predict_deterministic(&q).unwrap();
        let (m2, v2) = back.predict_deterministic(&q).unwrap();
        assert!((m1 - m2).amax() <= 1e-12);
        assert!((v1 - v2).amax() <= 1e-12);
    }

    #[test]
    fn gram_chol_reconstructs_and_alpha_solves() {
        let mut rng = StdRng::seed_from_u64(13);
        let ds = toy_dataset(&mut rng, 8, 2, 1);
        let hp = GpHyperparams::new(1.4, 0.2, vec![0.9, 1.1]).unwrap();
        let model = GpModel::from_hyperparams(ds.clone(), vec![hp.clone()]).unwrap();
        let dim = &model.dims()[0];
        let gram = gram_matrix(&ds, &hp);
        let recon = &dim.gram_chol * dim.gram_chol.transpose();
        let rel = (&recon - &gram).norm() / gram.norm();
        assert!(rel <= 1e-8, "cholesky reconstruction error {rel}");
        let resid = (&gram * &dim.alpha - ds.target_column(0)).norm() / ds.target_column(0).norm().max(1e-300);
        assert!(resid <= 1e-6, "alpha residual {resid}");
    }
}
