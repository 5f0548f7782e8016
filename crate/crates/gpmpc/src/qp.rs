//! Dense strictly convex quadratic programming by a primal active-set method.
//!
//! Solves min ½ xᵀΦx + ψᵀx subject to G̃ x ≤ Δ̃_U from a feasible start,
//! iterating a working set of constraints treated as equalities. Each
//! iteration solves the KKT saddle system for the current working set;
//! rank-deficient working sets are handled by a column-pivoted QR of G̃_Aᵀ
//! and a null-space solve. Warm starts reuse the previous working set.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde_json::json;
use thiserror::Error;

use crate::linalg::max_asymmetry;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch in QP data: {0}")]
    Dimension(String),
    #[error("Φ is not symmetric (max asymmetry {0:e})")]
    AsymmetricPhi(f64),
    #[error("Φ is not positive definite")]
    NotPositiveDefinite,
    #[error("start point infeasible: constraint {row} violated by {violation:e}")]
    InfeasibleStart { row: usize, violation: f64 },
    #[error("iterate left the feasible region (row {row}, violation {violation:e})")]
    FeasibilityLost { row: usize, violation: f64 },
    #[error("iteration cap {0} exceeded")]
    IterationCap(usize),
    #[error("KKT system solve failed: {0}")]
    KktFailure(String),
    #[error("rank-deficient working set with inconsistent right-hand side")]
    InconsistentConstraints,
}

/// min ½ xᵀΦx + ψᵀx  s.t.  g_mat · x ≤ g_rhs.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub phi: DMatrix<f64>,
    pub psi: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub g_rhs: DVector<f64>,
}

impl QpProblem {
    pub fn new(phi: DMatrix<f64>, psi: DVector<f64>, g_mat: DMatrix<f64>, g_rhs: DVector<f64>) -> Result<Self, QpError> {
        let p = psi.len();
        if phi.nrows() != p || phi.ncols() != p {
            return Err(QpError::Dimension(format!("Φ is {}×{}, ψ has length {p}", phi.nrows(), phi.ncols())));
        }
        if g_mat.nrows() != g_rhs.len() {
            return Err(QpError::Dimension(format!(
                "constraint matrix has {} rows, rhs has {}",
                g_mat.nrows(),
                g_rhs.len()
            )));
        }
        if g_mat.nrows() > 0 && g_mat.ncols() != p {
            return Err(QpError::Dimension(format!("constraint matrix has {} cols, expected {p}", g_mat.ncols())));
        }
        let asym = max_asymmetry(&phi);
        if asym > 1e-10 {
            return Err(QpError::AsymmetricPhi(asym));
        }
        Ok(Self { phi, psi, g_mat, g_rhs })
    }

    pub fn num_vars(&self) -> usize {
        self.psi.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.g_rhs.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.phi * x).dot(x) + self.psi.dot(x)
    }

    /// JSON snapshot of the problem (and optionally a solution) for failure triage.
    pub fn debug_dump(&self, solution: Option<&QpSolution>) -> serde_json::Value {
        json!({
            "phi": matrix_rows(&self.phi),
            "psi": self.psi.as_slice(),
            "g_mat": matrix_rows(&self.g_mat),
            "g_rhs": self.g_rhs.as_slice(),
            "solution": solution.map(|s| json!({
                "x": s.x.as_slice(),
                "lambda": s.lambda.as_slice(),
                "working_set": s.final_ws.indices(),
                "iterations": s.iterations,
            })),
        })
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

/// Ordered set of constraint indices treated as equalities.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkingSet {
    active: Vec<usize>,
}

impl WorkingSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { active: indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.active.binary_search(&i).is_ok()
    }

    fn insert(&mut self, i: usize) {
        if let Err(pos) = self.active.binary_search(&i) {
            self.active.insert(pos, i);
        }
    }

    fn remove(&mut self, i: usize) {
        if let Ok(pos) = self.active.binary_search(&i) {
            self.active.remove(pos);
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers for every constraint row; zero on inactive rows.
    pub lambda: DVector<f64>,
    pub final_ws: WorkingSet,
    pub iterations: usize,
    /// Number of degenerate (zero-length) steps taken.
    pub degenerate_steps: usize,
}

/// Multipliers at least this negative trigger a working-set removal.
const LAMBDA_TOL: f64 = 1e-9;
/// Slack under which a constraint counts as active at the start point.
const ACTIVE_TOL: f64 = 1e-9;

/// Solve the QP from a feasible start, optionally warm-started with a
/// previous working set (intersected with the constraints active at `start`).
pub fn solve_qp(prob: &QpProblem, start: &DVector<f64>, warm_ws: Option<&WorkingSet>) -> Result<QpSolution, QpError> {
    let p = prob.num_vars();
    let c = prob.num_constraints();
    if start.len() != p {
        return Err(QpError::Dimension(format!("start has length {}, expected {p}", start.len())));
    }

    // Feasibility of the start point.
    let resid = residuals(prob, start);
    for i in 0..c {
        if resid[i] < -1e-10 {
            return Err(QpError::InfeasibleStart { row: i, violation: -resid[i] });
        }
    }

    let chol = prob.phi.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;

    let mut ws = match warm_ws {
        Some(w) => WorkingSet::new(
            w.indices().iter().cloned().filter(|&i| i < c && resid[i].abs() <= ACTIVE_TOL).collect(),
        ),
        None => WorkingSet::new((0..c).filter(|&i| resid[i].abs() <= ACTIVE_TOL).collect()),
    };

    let mut x = start.clone();
    let cap = 50 * (p + c).max(1);
    let mut degenerate_steps = 0usize;

    for iter in 0..cap {
        let g_active = gather_rows(&prob.g_mat, ws.indices());
        let rhs_top = -(&prob.psi + &prob.phi * &x);
        let rhs_bot = DVector::from_iterator(
            ws.len(),
            ws.indices().iter().map(|&i| prob.g_rhs[i] - prob.g_mat.row(i).transpose().dot(&x)),
        );
        let (delta, lambda_active) = kkt_solve_with(&chol, &prob.phi, &g_active, &rhs_top, &rhs_bot)?;

        if delta.amax() <= 1e-11 * (1.0 + x.amax()) {
            // Stationary on the working-set manifold; check optimality.
            let mut min_lambda = f64::INFINITY;
            let mut min_idx = None;
            for (k, &row) in ws.indices().iter().enumerate() {
                if lambda_active[k] < min_lambda {
                    min_lambda = lambda_active[k];
                    min_idx = Some(row);
                }
            }
            if min_idx.is_none() || min_lambda >= -LAMBDA_TOL {
                let mut lambda = DVector::zeros(c);
                for (k, &row) in ws.indices().iter().enumerate() {
                    lambda[row] = lambda_active[k].max(0.0);
                }
                return Ok(QpSolution { x, lambda, final_ws: ws, iterations: iter + 1, degenerate_steps });
            }
            ws.remove(min_idx.unwrap());
        } else {
            let inactive: Vec<usize> = (0..c).filter(|i| !ws.contains(*i)).collect();
            let (kappa, blocking) = step_length(&x, &delta, prob, &inactive);
            if kappa == 0.0 {
                degenerate_steps += 1;
            }
            x += kappa * &delta;
            if let Some(b) = blocking {
                if kappa < 1.0 {
                    ws.insert(b);
                }
            }
            // Iterates must stay feasible; a large violation means numerical breakdown.
            let r = residuals(prob, &x);
            for i in 0..c {
                if r[i] < -1e-8 {
                    return Err(QpError::FeasibilityLost { row: i, violation: -r[i] });
                }
            }
        }
    }
    Err(QpError::IterationCap(cap))
}

fn residuals(prob: &QpProblem, x: &DVector<f64>) -> DVector<f64> {
    if prob.num_constraints() == 0 {
        return DVector::zeros(0);
    }
    &prob.g_rhs - &prob.g_mat * x
}

fn gather_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from(&m.row(r));
    }
    out
}

/// Solve the saddle system [Φ G_Aᵀ; G_A 0][δ; λ] = [rhs_top; rhs_bot].
///
/// Rank-deficient G_A is handled by a column-pivoted QR of G_Aᵀ; an
/// inconsistent right-hand side in that case is an error.
pub fn kkt_solve(
    phi: &DMatrix<f64>,
    g_active: &DMatrix<f64>,
    rhs_top: &DVector<f64>,
    rhs_bot: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let chol = phi.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    kkt_solve_with(&chol, phi, g_active, rhs_top, rhs_bot)
}

fn kkt_solve_with(
    chol: &Cholesky<f64, Dyn>,
    phi: &DMatrix<f64>,
    g_active: &DMatrix<f64>,
    rhs_top: &DVector<f64>,
    rhs_bot: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let p = phi.nrows();
    let a = g_active.nrows();
    if a == 0 {
        return Ok((chol.solve(rhs_top), DVector::zeros(0)));
    }

    let gt = g_active.transpose();
    let qr = PivotedQr::new(&gt);
    let rank = qr.rank;

    if rank == a {
        // Full row rank: range-space method through the Φ factorization.
        let phi_inv_gt = chol.solve(&gt);
        let schur = g_active * &phi_inv_gt;
        let schur_chol = schur
            .cholesky()
            .ok_or_else(|| QpError::KktFailure("Schur complement not positive definite".into()))?;
        let lambda = schur_chol.solve(&(g_active * chol.solve(rhs_top) - rhs_bot));
        let delta = chol.solve(&(rhs_top - &gt * &lambda));
        return Ok((delta, lambda));
    }

    // Rank-deficient working set: G_Aᵀ·P = Q·R with R = [R1 R2; 0 0],
    // R1 of size rank×rank. Null-space solve through Q2 (the paper-style
    // L1 = Q2(Q2ᵀΦQ2)⁻¹Q2ᵀ block), multipliers from the triangular part.
    let permuted_rhs_bot = qr.permute_transpose(rhs_bot);
    let r1 = qr.r.view((0, 0), (rank, rank)).into_owned();
    let mut w1 = permuted_rhs_bot.rows(0, rank).into_owned();
    // R1ᵀ w1 = leading permuted rhs.
    solve_lower_triangular(&r1.transpose(), &mut w1)?;
    // Consistency of the dependent rows.
    if rank < a {
        let r2 = qr.r.view((0, rank), (rank, a - rank));
        let check = r2.transpose() * &w1;
        let tail = permuted_rhs_bot.rows(rank, a - rank);
        let scale = 1.0 + rhs_bot.amax();
        if (check - tail).amax() > 1e-7 * scale {
            return Err(QpError::InconsistentConstraints);
        }
    }

    let q1 = qr.q.columns(0, rank).into_owned();
    let q2 = qr.q.columns(rank, p - rank).into_owned();
    let delta = if p > rank {
        let reduced = q2.transpose() * phi * &q2;
        let reduced_chol = reduced
            .cholesky()
            .ok_or_else(|| QpError::KktFailure("reduced Hessian not positive definite".into()))?;
        let w2 = reduced_chol.solve(&(q2.transpose() * (rhs_top - phi * (&q1 * &w1))));
        &q1 * &w1 + q2 * w2
    } else {
        &q1 * &w1
    };

    // Multipliers: R (Pᵀλ) = Qᵀ(rhs_top - Φδ), dependent entries set to zero.
    let resid = rhs_top - phi * &delta;
    let c_vec = qr.q.transpose() * resid;
    let mut lam1 = c_vec.rows(0, rank).into_owned();
    solve_upper_triangular(&r1, &mut lam1)?;
    let mut lambda_permuted = DVector::zeros(a);
    lambda_permuted.rows_mut(0, rank).copy_from(&lam1);
    let lambda = qr.permute(&lambda_permuted);
    Ok((delta, lambda))
}

/// Step length from `current` along `direction`: κ = min(1, min over
/// participating rows of slack/advance). Only inactive rows with
/// G̃_i·δ > 0 participate; ties and the blocking index resolve to the
/// lowest row index.
pub fn step_length(
    current: &DVector<f64>,
    direction: &DVector<f64>,
    prob: &QpProblem,
    inactive: &[usize],
) -> (f64, Option<usize>) {
    let mut kappa = 1.0f64;
    let mut blocking = None;
    for &i in inactive {
        let advance = prob.g_mat.row(i).transpose().dot(direction);
        if advance > 0.0 {
            let slack = prob.g_rhs[i] - prob.g_mat.row(i).transpose().dot(current);
            let ratio = (slack / advance).max(0.0);
            if ratio < kappa {
                kappa = ratio;
                blocking = Some(i);
            }
        }
    }
    (kappa, blocking)
}

fn solve_lower_triangular(l: &DMatrix<f64>, b: &mut DVector<f64>) -> Result<(), QpError> {
    let n = l.nrows();
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[(i, j)] * b[j];
        }
        if l[(i, i)].abs() < 1e-300 {
            return Err(QpError::KktFailure("singular triangular factor".into()));
        }
        b[i] = acc / l[(i, i)];
    }
    Ok(())
}

fn solve_upper_triangular(u: &DMatrix<f64>, b: &mut DVector<f64>) -> Result<(), QpError> {
    let n = u.nrows();
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in (i + 1)..n {
            acc -= u[(i, j)] * b[j];
        }
        if u[(i, i)].abs() < 1e-300 {
            return Err(QpError::KktFailure("singular triangular factor".into()));
        }
        b[i] = acc / u[(i, i)];
    }
    Ok(())
}

/// Householder QR with column pivoting and explicit full Q.
///
/// Decomposes M·P = Q·R; `rank` counts diagonal entries of R above a
/// scaled threshold.
struct PivotedQr {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// perm[j] = original column index now in position j.
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    fn new(m: &DMatrix<f64>) -> Self {
        let rows = m.nrows();
        let cols = m.ncols();
        let mut r = m.clone();
        let mut q = DMatrix::identity(rows, rows);
        let mut perm: Vec<usize> = (0..cols).collect();

        let steps = rows.min(cols);
        for k in 0..steps {
            // Pivot: remaining column with the largest trailing norm.
            let mut best = k;
            let mut best_norm = 0.0;
            for j in k..cols {
                let norm = r.view((k, j), (rows - k, 1)).norm_squared();
                if norm > best_norm {
                    best_norm = norm;
                    best = j;
                }
            }
            if best != k {
                r.swap_columns(k, best);
                perm.swap(k, best);
            }
            if best_norm == 0.0 {
                break;
            }

            // Householder reflector for column k.
            let mut v = r.view((k, k), (rows - k, 1)).into_owned();
            let alpha = -v[0].signum() * v.norm();
            v[0] -= alpha;
            let vnorm2 = v.norm_squared();
            if vnorm2 == 0.0 {
                continue;
            }
            // Apply I - 2vvᵀ/(vᵀv) to the trailing block of R and to Q.
            for j in k..cols {
                let col = r.view((k, j), (rows - k, 1)).into_owned();
                let coef = 2.0 * v.dot(&col) / vnorm2;
                for i in 0..(rows - k) {
                    r[(k + i, j)] -= coef * v[i];
                }
            }
            for j in 0..rows {
                let col = q.view((k, j), (rows - k, 1)).into_owned();
                let coef = 2.0 * v.dot(&col) / vnorm2;
                for i in 0..(rows - k) {
                    q[(k + i, j)] -= coef * v[i];
                }
            }
        }
        // Reflectors were accumulated as Qᵀ.
        let q = q.transpose();

        let scale = r.view((0, 0), (1, 1))[(0, 0)].abs().max(1e-300);
        let tol = scale * (rows.max(cols) as f64) * f64::EPSILON;
        let mut rank = 0;
        for k in 0..steps {
            if r[(k, k)].abs() > tol {
                rank += 1;
            } else {
                break;
            }
        }
        Self { q, r, perm, rank }
    }

    /// Pᵀ v: entry j becomes v[perm[j]].
    fn permute_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(v.len(), self.perm.iter().map(|&j| v[j]))
    }

    /// P v: entry perm[j] becomes v[j].
    fn permute(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (j, &pj) in self.perm.iter().enumerate() {
            out[pj] = v[j];
        }
        out
    }
}
