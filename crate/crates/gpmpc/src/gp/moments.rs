//! Exact moments of the GP output under a Gaussian input, with analytic
//! first derivatives of every moment w.r.t. the input mean and covariance.
//!
//! For the squared-exponential kernel all integrals are Gaussian and close
//! in terms of the per-dimension weight matrices W_a (the kernel's
//! quadratic-form weights). Writing ν_i = x_i - μ̃ and Λ_a = W_a⁻¹:
//!
//!   q_a,i = σ_a² |I + Σ̃W_a|^(-1/2) exp(-½ ν_iᵀ(Σ̃+Λ_a)⁻¹ν_i)
//!   m_a   = β_aᵀ q_a
//!   c_a   = Σ̃ (Σ̃+Λ_a)⁻¹ Σ_i β_a,i q_a,i ν_i          (input-output covariance)
//!   Q_ab[i,j] = k_a(x_i,μ̃) k_b(x_j,μ̃) |R|^(-1/2) exp(½ z_ijᵀ R⁻¹Σ̃ z_ij)
//!     with R = Σ̃(W_a+W_b) + I and z_ij = W_aν_i + W_bν_j
//!   E[Δx_a Δx_b] = β_aᵀ Q_ab β_b
//!   σ²_ab = β_aᵀQ_abβ_b - m_a m_b + δ_ab (σ_a² - tr(K_σ,a⁻¹ Q_aa))
//!
//! The derivative contractions reduce to weighted row/column sums of the
//! same D×D kernels, so the marginal cost over the moments themselves is a
//! handful of D²(n+m) products.

use nalgebra::{DMatrix, DVector};

use crate::linalg::symmetrize;

use super::model::GpModel;
use super::GpError;

pub(crate) struct MomentMatch {
    /// E[Δx] (n).
    pub delta_mean: DVector<f64>,
    /// Var[Δx] (n×n, symmetric).
    pub delta_cov: DMatrix<f64>,
    /// Cov[x̃, Δx] ((n+m)×n); column a is c_a.
    pub io_cov_full: DMatrix<f64>,
}

/// Gradients of the moments w.r.t. μ̃ and Σ̃. Gradients w.r.t. Σ̃ are
/// symmetric matrices G with df = Σ_pq G_pq dΣ̃_pq for symmetric
/// perturbations.
pub(crate) struct MomentDerivs {
    /// d m_a / dμ̃ per output.
    pub dmean_dmu: Vec<DVector<f64>>,
    /// d m_a / dΣ̃ per output.
    pub dmean_dsigma: Vec<DMatrix<f64>>,
    /// d σ²_ab / dμ̃ per pair (a ≤ b, index [`pair_index`]).
    pub dcov_dmu: Vec<DVector<f64>>,
    /// d σ²_ab / dΣ̃ per pair.
    pub dcov_dsigma: Vec<DMatrix<f64>>,
    /// d (c_a)_r / dμ̃: per output a, row r < n is the gradient of the
    /// r-th state component of c_a.
    pub dio_dmu: Vec<DMatrix<f64>>,
    /// d (c_a)_r / dΣ̃: per output a, per state row r.
    pub dio_dsigma: Vec<Vec<DMatrix<f64>>>,
}

pub(crate) fn pair_index(n: usize, a: usize, b: usize) -> usize {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    // Row-major upper triangle: offset of row `lo` plus column offset.
    lo * n - lo * (lo + 1) / 2 + hi
}

pub(crate) fn moment_match(
    model: &GpModel,
    mu_tilde: &DVector<f64>,
    sigma_tilde: &DMatrix<f64>,
) -> Result<MomentMatch, GpError> {
    Ok(moment_match_full(model, mu_tilde, sigma_tilde, false)?.0)
}

pub(crate) fn moment_match_full(
    model: &GpModel,
    mu_tilde: &DVector<f64>,
    sigma_tilde: &DMatrix<f64>,
    want_derivs: bool,
) -> Result<(MomentMatch, Option<MomentDerivs>), GpError> {
    let dim = model.input_dim();
    let n = model.output_dim();
    let d_rows = model.dataset().len();
    if mu_tilde.len() != dim {
        return Err(GpError::DimensionMismatch { expected: dim, got: mu_tilde.len() });
    }
    if sigma_tilde.nrows() != dim || sigma_tilde.ncols() != dim {
        return Err(GpError::DimensionMismatch { expected: dim, got: sigma_tilde.nrows() });
    }

    // ν rows: N[i, :] = (x_i - μ̃)ᵀ.
    let mut nu = DMatrix::zeros(d_rows, dim);
    for i in 0..d_rows {
        for c in 0..dim {
            nu[(i, c)] = model.dataset().inputs[(i, c)] - mu_tilde[c];
        }
    }

    let mut per_out = Vec::with_capacity(n);
    for a in 0..n {
        per_out.push(OutputTerms::build(model, a, &nu, sigma_tilde)?);
    }

    let mut delta_mean = DVector::zeros(n);
    let mut io_cov_full = DMatrix::zeros(dim, n);
    for (a, terms) in per_out.iter().enumerate() {
        delta_mean[a] = terms.mean;
        io_cov_full.column_mut(a).copy_from(&terms.io_cov);
    }

    let mut delta_cov = DMatrix::zeros(n, n);
    let mut derivs = want_derivs.then(|| MomentDerivs {
        dmean_dmu: per_out.iter().map(|t| t.dmean_dmu.clone()).collect(),
        dmean_dsigma: per_out.iter().map(|t| t.dmean_dsigma.clone()).collect(),
        dcov_dmu: vec![DVector::zeros(dim); n * (n + 1) / 2],
        dcov_dsigma: vec![DMatrix::zeros(dim, dim); n * (n + 1) / 2],
        dio_dmu: per_out.iter().map(|t| t.dio_dmu.clone()).collect(),
        dio_dsigma: per_out.iter().map(|t| t.dio_dsigma.clone()).collect(),
    });

    for a in 0..n {
        for b in a..n {
            let pair = PairTerms::build(model, a, b, &per_out[a], &per_out[b], &nu, sigma_tilde, want_derivs)?;
            delta_cov[(a, b)] = pair.cov;
            delta_cov[(b, a)] = pair.cov;
            if let Some(dv) = derivs.as_mut() {
                let idx = pair_index(n, a, b);
                dv.dcov_dmu[idx] = pair.dcov_dmu.unwrap();
                dv.dcov_dsigma[idx] = pair.dcov_dsigma.unwrap();
            }
        }
    }

    let mm = MomentMatch { delta_mean, delta_cov: symmetrize(&delta_cov), io_cov_full };
    Ok((mm, derivs))
}

/// Quantities attached to one output dimension a.
struct OutputTerms {
    /// q_a (D).
    q: DVector<f64>,
    /// log k_a(x_i, μ̃) (D).
    log_k: DVector<f64>,
    mean: f64,
    /// c_a = Σ̃ P_a M_a.
    io_cov: DVector<f64>,
    dmean_dmu: DVector<f64>,
    dmean_dsigma: DMatrix<f64>,
    dio_dmu: DMatrix<f64>,
    dio_dsigma: Vec<DMatrix<f64>>,
}

impl OutputTerms {
    fn build(model: &GpModel, a: usize, nu: &DMatrix<f64>, sigma_tilde: &DMatrix<f64>) -> Result<Self, GpError> {
        let dim = model.input_dim();
        let n = model.output_dim();
        let d_rows = nu.nrows();
        let gp = &model.dims()[a];
        let hp = &gp.hyperparams;

        // Σ̃ + Λ_a with Λ_a = W_a⁻¹ diagonal.
        let mut shifted = sigma_tilde.clone();
        for c in 0..dim {
            shifted[(c, c)] += 1.0 / hp.scales[c];
        }
        let shifted_chol = shifted
            .cholesky()
            .ok_or_else(|| GpError::InputCovNotPsd(crate::linalg::min_eigenvalue(sigma_tilde)))?;
        let p_mat = shifted_chol.inverse();
        // log det(I + Σ̃ W_a) = log det(Σ̃ + Λ_a) - log det(Λ_a).
        let log_det_shifted: f64 = shifted_chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_det_lambda: f64 = hp.scales.iter().map(|w| (1.0 / w).ln()).sum();
        let half_log_norm = 0.5 * (log_det_shifted - log_det_lambda);

        let pnu = nu * &p_mat; // rows (P_a ν_i)ᵀ
        let log_sig = hp.signal_variance.ln();

        let mut q = DVector::zeros(d_rows);
        let mut log_k = DVector::zeros(d_rows);
        for i in 0..d_rows {
            let mut quad_p = 0.0;
            let mut quad_w = 0.0;
            for c in 0..dim {
                quad_p += nu[(i, c)] * pnu[(i, c)];
                quad_w += nu[(i, c)] * nu[(i, c)] * hp.scales[c];
            }
            q[i] = (log_sig - half_log_norm - 0.5 * quad_p).exp();
            log_k[i] = log_sig - 0.5 * quad_w;
        }

        let beta_q = gp.alpha.component_mul(&q);
        let mean = gp.alpha.dot(&q);

        // M_a = Σ β_i q_i ν_i; c_a = Σ̃ P_a M_a.
        let m_vec = nu.transpose() * &beta_q;
        let f_mat = sigma_tilde * &p_mat;
        let io_cov = &f_mat * &m_vec;

        // dm_a/dμ̃ = Σ β_i q_i P_a ν_i.
        let dmean_dmu = pnu.transpose() * &beta_q;
        // dm_a/dΣ̃ = ½ Σ β_i q_i [(Pν)(Pν)ᵀ - P].
        let sum_bq: f64 = beta_q.iter().sum();
        let mut dmean_dsigma = DMatrix::zeros(dim, dim);
        for i in 0..d_rows {
            let w = 0.5 * beta_q[i];
            for p in 0..dim {
                for c in 0..dim {
                    dmean_dsigma[(p, c)] += w * pnu[(i, p)] * pnu[(i, c)];
                }
            }
        }
        dmean_dsigma -= 0.5 * sum_bq * &p_mat;

        // d(c_a)/dμ̃ = Σ̃P_a Σ β_i q_i (ν_i (Pν_i)ᵀ - I), state rows kept.
        let mut dm_vec_dmu = DMatrix::zeros(dim, dim);
        for i in 0..d_rows {
            let bq = beta_q[i];
            for p in 0..dim {
                for c in 0..dim {
                    dm_vec_dmu[(p, c)] += bq * nu[(i, p)] * pnu[(i, c)];
                }
            }
        }
        for p in 0..dim {
            dm_vec_dmu[(p, p)] -= sum_bq;
        }
        let dio_dmu_full = &f_mat * &dm_vec_dmu;
        let dio_dmu = dio_dmu_full.rows(0, n).into_owned();

        // d(c_a)_r/dΣ̃ = sym((e_r - Fᵀe_r)(P_a M_a)ᵀ)
        //   + Σ_i β_i q_i (Fν_i)_r [½(Pν_i)(Pν_i)ᵀ - ½P_a].
        let pm = &p_mat * &m_vec;
        let fnu = nu * f_mat.transpose(); // rows (F ν_i)ᵀ
        let mut dio_dsigma = Vec::with_capacity(n);
        for r in 0..n {
            let mut g = DVector::zeros(dim);
            for c in 0..dim {
                g[c] = (if c == r { 1.0 } else { 0.0 }) - f_mat[(r, c)];
            }
            let mut grad = DMatrix::zeros(dim, dim);
            for p in 0..dim {
                for c in 0..dim {
                    grad[(p, c)] = 0.5 * (g[p] * pm[c] + g[c] * pm[p]);
                }
            }
            let mut weight_sum = 0.0;
            for i in 0..d_rows {
                let w = 0.5 * beta_q[i] * fnu[(i, r)];
                weight_sum += w;
                for p in 0..dim {
                    for c in 0..dim {
                        grad[(p, c)] += w * pnu[(i, p)] * pnu[(i, c)];
                    }
                }
            }
            grad -= weight_sum * &p_mat;
            dio_dsigma.push(grad);
        }

        Ok(Self { q, log_k, mean, io_cov, dmean_dmu, dmean_dsigma, dio_dmu, dio_dsigma })
    }
}

struct PairTerms {
    cov: f64,
    dcov_dmu: Option<DVector<f64>>,
    dcov_dsigma: Option<DMatrix<f64>>,
}

impl PairTerms {
    #[allow(clippy::too_many_arguments)]
    fn build(
        model: &GpModel,
        a: usize,
        b: usize,
        out_a: &OutputTerms,
        out_b: &OutputTerms,
        nu: &DMatrix<f64>,
        sigma_tilde: &DMatrix<f64>,
        want_derivs: bool,
    ) -> Result<Self, GpError> {
        let dim = model.input_dim();
        let d_rows = nu.nrows();
        let hp_a = &model.dims()[a].hyperparams;
        let hp_b = &model.dims()[b].hyperparams;
        let beta_a = &model.dims()[a].alpha;
        let beta_b = &model.dims()[b].alpha;

        // W̄ = W_a + W_b (diagonal), R = Σ̃W̄ + I, S = R⁻¹Σ̃ (symmetric).
        let wbar: Vec<f64> = (0..dim).map(|c| hp_a.scales[c] + hp_b.scales[c]).collect();
        let mut r_mat = DMatrix::zeros(dim, dim);
        for p in 0..dim {
            for c in 0..dim {
                r_mat[(p, c)] = sigma_tilde[(p, c)] * wbar[c];
            }
            r_mat[(p, p)] += 1.0;
        }
        let r_lu = r_mat.lu();
        let det = r_lu.determinant();
        if !(det > 0.0) {
            return Err(GpError::InputCovNotPsd(det));
        }
        let log_det_r = det.ln();
        let s_mat = symmetrize(
            &r_lu.solve(sigma_tilde).ok_or(GpError::InputCovNotPsd(f64::NEG_INFINITY))?,
        );

        // WN_a rows = (W_a ν_i)ᵀ.
        let mut wn_a = nu.clone();
        let mut wn_b = nu.clone();
        for c in 0..dim {
            let wa = hp_a.scales[c];
            let wb = hp_b.scales[c];
            for i in 0..d_rows {
                wn_a[(i, c)] *= wa;
                wn_b[(i, c)] *= wb;
            }
        }

        // Pieces of ½ z ᵀ S z = ½ quad_a_i + cross_ij + ½ quad_b_j.
        let t_a = &wn_a * &s_mat;
        let t_b = &wn_b * &s_mat;
        let cross = &t_a * wn_b.transpose();
        let mut quad_a = DVector::zeros(d_rows);
        let mut quad_b = DVector::zeros(d_rows);
        for i in 0..d_rows {
            let mut qa = 0.0;
            let mut qb = 0.0;
            for c in 0..dim {
                qa += t_a[(i, c)] * wn_a[(i, c)];
                qb += t_b[(i, c)] * wn_b[(i, c)];
            }
            quad_a[i] = qa;
            quad_b[i] = qb;
        }

        let mut q_mat = DMatrix::zeros(d_rows, d_rows);
        for j in 0..d_rows {
            let col_term = out_b.log_k[j] + 0.5 * quad_b[j] - 0.5 * log_det_r;
            for i in 0..d_rows {
                q_mat[(i, j)] = (out_a.log_k[i] + 0.5 * quad_a[i] + cross[(i, j)] + col_term).exp();
            }
        }

        let m2 = beta_a.dot(&(&q_mat * beta_b));
        let mut cov = m2 - out_a.mean * out_b.mean;
        if a == b {
            let k_inv = &model.dims()[a].gram_inv;
            let mut trace_term = 0.0;
            for j in 0..d_rows {
                for i in 0..d_rows {
                    trace_term += k_inv[(i, j)] * q_mat[(i, j)];
                }
            }
            cov += hp_a.signal_variance - trace_term;
        }

        if !want_derivs {
            return Ok(Self { cov, dcov_dmu: None, dcov_dsigma: None });
        }

        // (I - W̄S); g rows Ga[i,:] = (W_aν_i)ᵀ(I - SW̄).
        let mut i_minus_ws = DMatrix::identity(dim, dim);
        for p in 0..dim {
            for c in 0..dim {
                i_minus_ws[(p, c)] -= wbar[p] * s_mat[(p, c)];
            }
        }
        let ga = &wn_a * i_minus_ws.transpose();
        let gb = &wn_b * i_minus_ws.transpose();

        // E = (Σ̃ + W̄⁻¹)⁻¹.
        let e_mat = {
            let mut m = sigma_tilde.clone();
            for c in 0..dim {
                m[(c, c)] += 1.0 / wbar[c];
            }
            m.cholesky().ok_or(GpError::InputCovNotPsd(f64::NEG_INFINITY))?.inverse()
        };

        // Contract weighted sums over g_ij = ga_i + gb_j:
        // returns (Σw, Σ w g_ij, Σ w g_ij g_ijᵀ).
        let contract = |weights: &dyn Fn(usize, usize) -> f64| {
            let mut u = DVector::zeros(d_rows);
            let mut v = DVector::zeros(d_rows);
            let mut w_gb = DMatrix::zeros(d_rows, dim);
            for j in 0..d_rows {
                for i in 0..d_rows {
                    let w = weights(i, j) * q_mat[(i, j)];
                    u[i] += w;
                    v[j] += w;
                    for c in 0..dim {
                        w_gb[(i, c)] += w * gb[(j, c)];
                    }
                }
            }
            let sw = u.sum();
            let lin = ga.transpose() * &u + gb.transpose() * &v;
            let mut quad = DMatrix::zeros(dim, dim);
            for i in 0..d_rows {
                let wi = u[i];
                for p in 0..dim {
                    for c in 0..dim {
                        quad[(p, c)] += wi * ga[(i, p)] * ga[(i, c)];
                    }
                }
            }
            for j in 0..d_rows {
                let wj = v[j];
                for p in 0..dim {
                    for c in 0..dim {
                        quad[(p, c)] += wj * gb[(j, p)] * gb[(j, c)];
                    }
                }
            }
            let x = ga.transpose() * &w_gb;
            quad += &x + x.transpose();
            (sw, lin, quad)
        };

        let (sw, lin, quad) = contract(&|i, j| beta_a[i] * beta_b[j]);
        let mut dcov_dmu = lin;
        let mut dcov_dsigma = -0.5 * sw * &e_mat + 0.5 * &quad;

        if a == b {
            let k_inv = &model.dims()[a].gram_inv;
            let (swt, lint, quadt) = contract(&|i, j| k_inv[(i, j)]);
            dcov_dmu -= &lint;
            dcov_dsigma -= -0.5 * swt * &e_mat + 0.5 * &quadt;
        }

        // Product-rule terms of -m_a m_b.
        dcov_dmu -= out_b.mean * &out_a.dmean_dmu + out_a.mean * &out_b.dmean_dmu;
        dcov_dsigma -= out_b.mean * &out_a.dmean_dsigma + out_a.mean * &out_b.dmean_dsigma;

        Ok(Self { cov, dcov_dmu: Some(dcov_dmu), dcov_dsigma: Some(symmetrize(&dcov_dsigma)) })
    }
}
