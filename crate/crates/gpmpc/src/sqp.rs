//! Feasibility-perturbed trust-region SQP for nonlinear objectives under
//! linear inequality constraints.
//!
//! Each iteration minimizes the quadratic model ∇h(z)ᵀΔz + ½ΔzᵀHΔz subject
//! to the linear constraints and an ∞-norm trust region (box rows appended
//! to the QP), so the subproblem is handled by the active-set solver and
//! every iterate stays feasible: with linear constraints the feasibility
//! perturbation is the identity. The Hessian is maintained by damped-free
//! BFGS with a curvature safeguard; the radius follows the acceptability
//! ratio of actual to predicted decrease.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{solve_qp, QpError, QpProblem, WorkingSet};

#[derive(Debug, Error)]
pub enum SqpError {
    #[error("initial point infeasible: row {row} violated by {violation:e}")]
    InfeasibleStart { row: usize, violation: f64 },
    #[error("QP subproblem failed: {0}")]
    Subproblem(#[from] QpError),
    #[error("invalid trust-region thresholds: need 0 < τ₁ < τ₂ < 1")]
    BadThresholds,
    #[error("objective or gradient returned a non-finite value")]
    NonFinite,
    #[error("io: {0}")]
    Io(String),
}

/// Nonlinear program: minimize `objective` subject to
/// `lower ≤ constraint_matrix · z ≤ upper`.
pub struct NlpSpec<'a> {
    pub objective: Box<dyn Fn(&DVector<f64>) -> f64 + 'a>,
    pub gradient: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + 'a>,
    pub constraint_matrix: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub dims: usize,
}

impl<'a> NlpSpec<'a> {
    /// Unconstrained problem of the given dimension.
    pub fn unconstrained(
        dims: usize,
        objective: impl Fn(&DVector<f64>) -> f64 + 'a,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + 'a,
    ) -> Self {
        Self {
            objective: Box::new(objective),
            gradient: Box::new(gradient),
            constraint_matrix: DMatrix::zeros(0, dims),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
            dims,
        }
    }

    fn check_feasible(&self, z: &DVector<f64>) -> Result<(), SqpError> {
        let vals = &self.constraint_matrix * z;
        for i in 0..vals.len() {
            let below = self.lower[i] - vals[i];
            let above = vals[i] - self.upper[i];
            if below > 1e-10 {
                return Err(SqpError::InfeasibleStart { row: i, violation: below });
            }
            if above > 1e-10 {
                return Err(SqpError::InfeasibleStart { row: i, violation: above });
            }
        }
        Ok(())
    }
}

/// Trust-region and Hessian state carried across iterations.
#[derive(Debug, Clone)]
pub struct TrustRegionState {
    pub radius: f64,
    pub radius_max: f64,
    pub tau: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub hessian: DMatrix<f64>,
}

impl TrustRegionState {
    pub fn validate(&self) -> Result<(), SqpError> {
        if !(0.0 < self.tau1 && self.tau1 < self.tau2 && self.tau2 < 1.0) {
            return Err(SqpError::BadThresholds);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SqpConfig {
    pub max_iterations: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub radius_max: f64,
    /// Relative model-decrease threshold for the stationarity stop.
    pub stop_tol: f64,
}

impl Default for SqpConfig {
    fn default() -> Self {
        Self { max_iterations: 100, tau1: 0.1, tau2: 0.75, radius_max: 1e3, stop_tol: 1e-10 }
    }
}

/// One row of the iterate history.
#[derive(Debug, Clone)]
pub struct IterateRecord {
    pub iteration: usize,
    pub objective: f64,
    pub rho: f64,
    pub radius: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

/// Write the history as CSV (iteration, h, rho, gamma, step_norm).
pub fn history_to_csv(history: &[IterateRecord], path: &Path) -> Result<(), SqpError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SqpError::Io(e.to_string()))?;
    w.write_record(["iteration", "h", "rho", "gamma", "step_norm"])
        .map_err(|e| SqpError::Io(e.to_string()))?;
    for rec in history {
        w.write_record(&[
            rec.iteration.to_string(),
            format!("{}", rec.objective),
            format!("{}", rec.rho),
            format!("{}", rec.radius),
            format!("{}", rec.step_norm),
        ])
        .map_err(|e| SqpError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| SqpError::Io(e.to_string()))
}

pub struct SqpResult {
    pub z: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub history: Vec<IterateRecord>,
}

/// Minimize the NLP from a feasible start.
pub fn solve_fpsqp(nlp: &NlpSpec, z0: &DVector<f64>, config: &SqpConfig) -> Result<SqpResult, SqpError> {
    nlp.check_feasible(z0)?;
    let grad0 = (nlp.gradient)(z0);
    if grad0.iter().any(|g| !g.is_finite()) {
        return Err(SqpError::NonFinite);
    }
    let mut tr = TrustRegionState {
        radius: grad0.norm().min(config.radius_max).max(1e-12),
        radius_max: config.radius_max,
        tau: 1.0,
        tau1: config.tau1,
        tau2: config.tau2,
        hessian: DMatrix::identity(nlp.dims, nlp.dims) * grad0.norm().max(1.0),
    };
    tr.validate()?;

    let mut z = z0.clone();
    let mut h = (nlp.objective)(&z);
    let mut grad = grad0;
    let mut history = Vec::new();
    let mut warm: Option<WorkingSet> = None;

    for iteration in 0..config.max_iterations {
        let (step, ws) = qp_subproblem_with_warm(nlp, &z, &grad, &tr, warm.as_ref())?;
        warm = Some(ws);

        let model_change = grad.dot(&step) + 0.5 * (&tr.hessian * &step).dot(&step);
        // Vanishing model decrease certifies stationarity only when the step
        // is interior to the trust region; a clipped step just means the
        // radius starved and must be regrown through the τ recursion.
        let clipped = step.amax() >= tr.radius * (1.0 - 1e-9);
        if model_change >= -config.stop_tol * (1.0 + h.abs()) && (!clipped || model_change >= 0.0) {
            return Ok(SqpResult { z, objective: h, iterations: iteration, history });
        }

        let trial = &z + &step;
        let h_trial = (nlp.objective)(&trial);
        if !h_trial.is_finite() {
            return Err(SqpError::NonFinite);
        }
        let rho = (h_trial - h) / model_change;
        let accepted = rho >= tr.tau1;
        history.push(IterateRecord {
            iteration,
            objective: h,
            rho,
            radius: tr.radius,
            step_norm: step.norm(),
            accepted,
        });

        if accepted {
            let grad_trial = (nlp.gradient)(&trial);
            let grad_diff = &grad_trial - &grad;
            tr.tau = if grad_diff.norm() > 1e-300 { step.norm() / grad_diff.norm() } else { tr.tau };
            tr.hessian = bfgs_update(&tr, &step, &grad_diff);
            z = trial;
            h = h_trial;
            grad = grad_trial;
        } else {
            tr.tau /= 4.0;
        }
        // Radius from the adaptive τ; capped in both branches.
        tr.radius = (tr.tau * grad.norm()).min(tr.radius_max).max(1e-14);
    }
    Ok(SqpResult { z, objective: h, iterations: config.max_iterations, history })
}

/// Solve the QP subproblem at z: min ∇hᵀd + ½dᵀHd subject to the linear
/// constraints at z + d and the ∞-norm trust region.
pub fn qp_subproblem(nlp: &NlpSpec, z: &DVector<f64>, tr: &TrustRegionState) -> Result<DVector<f64>, SqpError> {
    let grad = (nlp.gradient)(z);
    Ok(qp_subproblem_with_warm(nlp, z, &grad, tr, None)?.0)
}

fn qp_subproblem_with_warm(
    nlp: &NlpSpec,
    z: &DVector<f64>,
    grad: &DVector<f64>,
    tr: &TrustRegionState,
    warm: Option<&WorkingSet>,
) -> Result<(DVector<f64>, WorkingSet), SqpError> {
    let p = nlp.dims;
    let rows = nlp.constraint_matrix.nrows();
    // Stack: M d ≤ upper - Mz; -M d ≤ Mz - lower; d ≤ γ; -d ≤ γ.
    let mut g = DMatrix::zeros(2 * rows + 2 * p, p);
    let mut rhs = DVector::zeros(2 * rows + 2 * p);
    if rows > 0 {
        let mz = &nlp.constraint_matrix * z;
        g.view_mut((0, 0), (rows, p)).copy_from(&nlp.constraint_matrix);
        g.view_mut((rows, 0), (rows, p)).copy_from(&(-&nlp.constraint_matrix));
        for i in 0..rows {
            // Clamp at zero so roundoff-level violations keep d = 0 feasible.
            rhs[i] = (nlp.upper[i] - mz[i]).max(0.0);
            rhs[rows + i] = (mz[i] - nlp.lower[i]).max(0.0);
        }
    }
    for i in 0..p {
        g[(2 * rows + i, i)] = 1.0;
        rhs[2 * rows + i] = tr.radius;
        g[(2 * rows + p + i, i)] = -1.0;
        rhs[2 * rows + p + i] = tr.radius;
    }
    let prob = QpProblem::new(tr.hessian.clone(), grad.clone(), g, rhs)?;
    let sol = solve_qp(&prob, &DVector::zeros(p), warm)?;
    Ok((sol.x, sol.final_ws))
}

/// Actual-over-predicted decrease ratio of a step.
///
/// Returns `None` when the model predicts no change (stationarity signal).
pub fn acceptability_ratio(
    nlp: &NlpSpec,
    z: &DVector<f64>,
    step: &DVector<f64>,
    tr: &TrustRegionState,
) -> Option<f64> {
    let grad = (nlp.gradient)(z);
    let model_change = grad.dot(step) + 0.5 * (&tr.hessian * step).dot(step);
    if model_change == 0.0 {
        return None;
    }
    let h0 = (nlp.objective)(z);
    let h1 = (nlp.objective)(&(z + step));
    Some((h1 - h0) / model_change)
}

/// BFGS update with a curvature safeguard: the update is skipped when
/// yᵀs ≤ 1e-8 ‖y‖‖s‖, keeping the Hessian symmetric positive definite.
pub fn bfgs_update(tr: &TrustRegionState, dz: &DVector<f64>, grad_diff: &DVector<f64>) -> DMatrix<f64> {
    let h = &tr.hessian;
    let curvature = grad_diff.dot(dz);
    if curvature <= 1e-8 * grad_diff.norm() * dz.norm() {
        return h.clone();
    }
    let hdz = h * dz;
    let dzh_dz = hdz.dot(dz);
    if dzh_dz <= 0.0 {
        return h.clone();
    }
    let mut updated = h - (&hdz * hdz.transpose()) / dzh_dz + (grad_diff * grad_diff.transpose()) / curvature;
    // Explicit symmetrization guards against drift over many updates.
    updated = crate::linalg::symmetrize(&updated);
    updated
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_asymmetry;
    use approx::assert_relative_eq;

    fn box_nlp<'a>(
        dims: usize,
        lo: f64,
        hi: f64,
        objective: impl Fn(&DVector<f64>) -> f64 + 'a,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + 'a,
    ) -> NlpSpec<'a> {
        NlpSpec {
            objective: Box::new(objective),
            gradient: Box::new(gradient),
            constraint_matrix: DMatrix::identity(dims, dims),
            lower: DVector::from_element(dims, lo),
            upper: DVector::from_element(dims, hi),
            dims,
        }
    }

    #[test]
    fn quadratic_with_inactive_constraints_reaches_minimum() {
        // h(z) = (z0-1)² + 2(z1+0.5)², minimum (1, -0.5) interior to the box.
        let nlp = box_nlp(
            2,
            -5.0,
            5.0,
            |z| (z[0] - 1.0).powi(2) + 2.0 * (z[1] + 0.5).powi(2),
            |z| DVector::from_vec(vec![2.0 * (z[0] - 1.0), 4.0 * (z[1] + 0.5)]),
        );
        let res = solve_fpsqp(&nlp, &DVector::zeros(2), &SqpConfig::default()).unwrap();
        assert!(res.iterations <= 10, "took {} iterations", res.iterations);
        assert_relative_eq!(res.z[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(res.z[1], -0.5, epsilon = 1e-6);
    }

    #[test]
    fn stationary_start_stops_immediately() {
        let nlp = box_nlp(
            2,
            -1.0,
            1.0,
            |z| z.norm_squared(),
            |z| 2.0 * z,
        );
        let res = solve_fpsqp(&nlp, &DVector::zeros(2), &SqpConfig::default()).unwrap();
        assert!(res.iterations <= 1);
        assert_eq!(res.z, DVector::zeros(2));
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let nlp = box_nlp(1, -1.0, 1.0, |z| z[0] * z[0], |z| 2.0 * z.clone());
        assert!(matches!(
            solve_fpsqp(&nlp, &DVector::from_vec(vec![2.0]), &SqpConfig::default()),
            Err(SqpError::InfeasibleStart { .. })
        ));
    }

    #[test]
    fn rosenbrock_with_box_reaches_kkt_point() {
        let rosen = |z: &DVector<f64>| (1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2);
        let rosen_grad = |z: &DVector<f64>| {
            DVector::from_vec(vec![
                -2.0 * (1.0 - z[0]) - 400.0 * z[0] * (z[1] - z[0] * z[0]),
                200.0 * (z[1] - z[0] * z[0]),
            ])
        };
        let nlp = box_nlp(2, -2.0, 2.0, rosen, rosen_grad);
        let cfg = SqpConfig { max_iterations: 500, ..SqpConfig::default() };
        let res = solve_fpsqp(&nlp, &DVector::from_vec(vec![-1.2, 1.0]), &cfg).unwrap();
        // Interior optimum (1,1): the KKT residual is just the gradient.
        let g = rosen_grad(&res.z);
        assert!(
            g.norm() <= 1e-5,
            "KKT residual {} at {:?} after {} iterations",
            g.norm(),
            res.z.as_slice(),
            res.iterations
        );
        // Every recorded iterate stayed in the box.
        assert!(res.z.amax() <= 2.0 + 1e-10);
    }

    #[test]
    fn iterates_stay_feasible() {
        // Steep objective pushing against the boundary.
        let nlp = box_nlp(
            2,
            -0.5,
            0.5,
            |z| (z[0] - 3.0).powi(2) + (z[1] + 3.0).powi(2),
            |z| DVector::from_vec(vec![2.0 * (z[0] - 3.0), 2.0 * (z[1] + 3.0)]),
        );
        let res = solve_fpsqp(&nlp, &DVector::zeros(2), &SqpConfig::default()).unwrap();
        assert_relative_eq!(res.z[0], 0.5, epsilon = 1e-8);
        assert_relative_eq!(res.z[1], -0.5, epsilon = 1e-8);
    }

    #[test]
    fn subproblem_zero_gradient_gives_zero_step() {
        let nlp = box_nlp(2, -1.0, 1.0, |_| 0.0, |_| DVector::zeros(2));
        let tr = TrustRegionState {
            radius: 1.0,
            radius_max: 10.0,
            tau: 1.0,
            tau1: 0.1,
            tau2: 0.75,
            hessian: DMatrix::identity(2, 2),
        };
        let step = qp_subproblem(&nlp, &DVector::zeros(2), &tr).unwrap();
        assert!(step.amax() <= 1e-12);
    }

    #[test]
    fn subproblem_hand_values() {
        // Model 2d + ½d², unconstrained in a wide box: d = -2; with γ = 1: d = -1.
        let nlp = NlpSpec::unconstrained(1, |z| 2.0 * z[0], |_| DVector::from_vec(vec![2.0]));
        let mut tr = TrustRegionState {
            radius: 10.0,
            radius_max: 10.0,
            tau: 1.0,
            tau1: 0.1,
            tau2: 0.75,
            hessian: DMatrix::identity(1, 1),
        };
        let step = qp_subproblem(&nlp, &DVector::zeros(1), &tr).unwrap();
        assert_relative_eq!(step[0], -2.0, epsilon = 1e-10);
        tr.radius = 1.0;
        let clipped = qp_subproblem(&nlp, &DVector::zeros(1), &tr).unwrap();
        assert_relative_eq!(clipped[0], -1.0, epsilon = 1e-10);
    }

    #[test]
    fn ratio_is_one_when_model_exact() {
        // h quadratic with H equal to its true Hessian.
        let nlp = NlpSpec::unconstrained(
            2,
            |z| z[0] * z[0] + 2.0 * z[1] * z[1] + z[0],
            |z| DVector::from_vec(vec![2.0 * z[0] + 1.0, 4.0 * z[1]]),
        );
        let tr = TrustRegionState {
            radius: 1.0,
            radius_max: 1.0,
            tau: 1.0,
            tau1: 0.1,
            tau2: 0.75,
            hessian: DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]),
        };
        let z = DVector::from_vec(vec![0.7, -0.3]);
        let step = DVector::from_vec(vec![-0.4, 0.2]);
        let rho = acceptability_ratio(&nlp, &z, &step, &tr).unwrap();
        assert_relative_eq!(rho, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn ratio_negative_when_objective_increases() {
        // Model predicts decrease but true objective increases along the step.
        let nlp = NlpSpec::unconstrained(1, |z| -z[0] + z[0] * z[0] * 10.0, |z| {
            DVector::from_vec(vec![-1.0 + 20.0 * z[0]])
        });
        let tr = TrustRegionState {
            radius: 1.0,
            radius_max: 1.0,
            tau: 1.0,
            tau1: 0.1,
            tau2: 0.75,
            hessian: DMatrix::identity(1, 1),
        };
        // At z=0 the model sees gradient -1; a big positive step overshoots.
        let rho = acceptability_ratio(&nlp, &DVector::zeros(1), &DVector::from_vec(vec![0.9]), &tr).unwrap();
        assert!(rho < 0.0, "rho = {rho}");
    }

    #[test]
    fn ratio_hand_value_linear_objective() {
        // h linear: h(z) = z; H = I. Step d: model change = d + ½d².
        let nlp = NlpSpec::unconstrained(1, |z| z[0], |_| DVector::from_vec(vec![1.0]));
        let tr = TrustRegionState {
            radius: 10.0,
            radius_max: 10.0,
            tau: 1.0,
            tau1: 0.1,
            tau2: 0.75,
            hessian: DMatrix::identity(1, 1),
        };
        // Full model step d = -1: model change = -1 + 0.5 = -0.5; actual = -1.
        let rho = acceptability_ratio(&nlp, &DVector::zeros(1), &DVector::from_vec(vec![-1.0]), &tr).unwrap();
        assert_relative_eq!(rho, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn bfgs_identity_fixed_point() {
        let tr = TrustRegionState {
            radius: 1.0,
            radius_max: 1.0,
            tau: 1.0,
            tau1: 0.1,
            tau2: 0.75,
            hessian: DMatrix::identity(3, 3),
        };
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let updated = bfgs_update(&tr, &e1, &e1);
        assert!((updated - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn bfgs_skips_on_negative_curvature() {
        let tr = TrustRegionState {
            radius: 1.0,
            radius_max: 1.0,
            tau: 1.0,
            tau1: 0.1,
            tau2: 0.75,
            hessian: DMatrix::identity(2, 2) * 3.0,
        };
        let dz = DVector::from_vec(vec![1.0, 0.0]);
        let y = DVector::from_vec(vec![-1.0, 0.5]);
        let updated = bfgs_update(&tr, &dz, &y);
        assert_eq!(updated, tr.hessian);
    }

    #[test]
    fn bfgs_satisfies_secant_equation() {
        let tr = TrustRegionState {
            radius: 1.0,
            radius_max: 1.0,
            tau: 1.0,
            tau1: 0.1,
            tau2: 0.75,
            hessian: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]),
        };
        let dz = DVector::from_vec(vec![0.4, -0.7]);
        let y = DVector::from_vec(vec![0.9, -0.2]);
        let updated = bfgs_update(&tr, &dz, &y);
        assert!((&updated * &dz - &y).amax() <= 1e-10, "secant violated");
        assert!(max_asymmetry(&updated) <= 1e-12);
        assert!(crate::linalg::min_eigenvalue(&updated) > 0.0);
    }

    #[test]
    fn accepted_steps_decrease_objective_and_radius_capped() {
        let nlp = box_nlp(
            2,
            -4.0,
            4.0,
            |z| (z[0] - 2.0).powi(2) + (z[1] - 2.0).powi(2) + 0.1 * (z[0] * z[1]).powi(2),
            |z| {
                DVector::from_vec(vec![
                    2.0 * (z[0] - 2.0) + 0.2 * z[0] * z[1] * z[1],
                    2.0 * (z[1] - 2.0) + 0.2 * z[1] * z[0] * z[0],
                ])
            },
        );
        let cfg = SqpConfig { radius_max: 0.5, ..SqpConfig::default() };
        let res = solve_fpsqp(&nlp, &DVector::zeros(2), &cfg).unwrap();
        let mut last = f64::INFINITY;
        for rec in &res.history {
            assert!(rec.radius <= cfg.radius_max + 1e-12);
            if rec.accepted {
                assert!(rec.objective < last + 1e-12);
                last = rec.objective;
            }
        }
        // Interior optimum (≈ (1.6, 1.6), f ≈ 0.975): gradient must vanish.
        let g = DVector::from_vec(vec![
            2.0 * (res.z[0] - 2.0) + 0.2 * res.z[0] * res.z[1] * res.z[1],
            2.0 * (res.z[1] - 2.0) + 0.2 * res.z[1] * res.z[0] * res.z[0],
        ]);
        assert!(g.norm() <= 1e-4, "gradient {} at {:?}", g.norm(), res.z.as_slice());
    }

    #[test]
    fn history_csv_roundtrip() {
        let recs = vec![IterateRecord {
            iteration: 0,
            objective: 1.5,
            rho: 0.9,
            radius: 0.25,
            step_norm: 0.1,
            accepted: true,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hist.csv");
        history_to_csv(&recs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iteration,h,rho,gamma,step_norm"));
        assert!(text.contains("0,1.5,0.9,0.25,0.1"));
    }
}
