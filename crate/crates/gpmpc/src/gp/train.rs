//! Hyperparameter learning by maximizing the per-dimension log marginal
//! likelihood over log-reparameterized hyperparameters (positivity for free),
//! with multi-start quasi-Newton ascent. Output dimensions are independent
//! and train in parallel.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::sqp::{solve_fpsqp, NlpSpec, SqpConfig};

use super::model::{log_marginal_likelihood, log_marginal_likelihood_grad, GpModel};
use super::{GpDataset, GpError, GpHyperparams};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Quasi-Newton iteration cap per restart.
    pub max_iterations: usize,
    /// Number of multi-start points per output dimension.
    pub restarts: usize,
    /// Relative model-decrease stopping tolerance.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_iterations: 120, restarts: 5, tolerance: 1e-9, seed: 0 }
    }
}

/// Objective value treated as "factorization failed" — large but finite so
/// the trust region backs away instead of aborting.
const FAILED_OBJECTIVE: f64 = 1e15;

/// Train one GP per output dimension on the shared dataset.
///
/// The achieved likelihood per dimension is at least the likelihood at every
/// multi-start initial point.
pub fn train(dataset: GpDataset, config: &TrainConfig) -> Result<GpModel, GpError> {
    if dataset.len() < 2 {
        return Err(GpError::Training(format!("need at least 2 rows, got {}", dataset.len())));
    }
    let n_out = dataset.output_dim();
    let per_dim: Vec<Result<GpHyperparams, GpError>> = (0..n_out)
        .into_par_iter()
        .map(|d| train_dimension(&dataset, d, config))
        .collect();
    let mut hps = Vec::with_capacity(n_out);
    for r in per_dim {
        hps.push(r?);
    }
    GpModel::from_hyperparams(dataset, hps)
}

fn train_dimension(dataset: &GpDataset, dim: usize, config: &TrainConfig) -> Result<GpHyperparams, GpError> {
    let n_in = dataset.input_dim();
    let starts = initial_points(dataset, dim, config);

    let objective = |theta: &DVector<f64>| -> f64 {
        match hp_from_log(theta, n_in).and_then(|hp| log_marginal_likelihood(dataset, &hp, dim)) {
            Ok(ll) => -ll,
            Err(_) => FAILED_OBJECTIVE,
        }
    };
    let gradient = |theta: &DVector<f64>| -> DVector<f64> {
        match hp_from_log(theta, n_in).and_then(|hp| log_marginal_likelihood_grad(dataset, &hp, dim)) {
            Ok(g) => -g,
            Err(_) => DVector::zeros(theta.len()),
        }
    };

    let sqp_cfg = SqpConfig {
        max_iterations: config.max_iterations,
        stop_tol: config.tolerance,
        ..SqpConfig::default()
    };

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut any_start_ok = false;
    let mut best_start_value = f64::INFINITY;
    for start in &starts {
        let at_start = objective(start);
        if at_start >= FAILED_OBJECTIVE {
            continue;
        }
        any_start_ok = true;
        best_start_value = best_start_value.min(at_start);
        let nlp = NlpSpec::unconstrained(start.len(), objective, gradient);
        let Ok(result) = solve_fpsqp(&nlp, start, &sqp_cfg) else { continue };
        // Ascent property: the accepted endpoint can only improve the start.
        debug_assert!(result.objective <= at_start + 1e-9);
        if best.as_ref().map_or(true, |(b, _)| result.objective < *b) {
            best = Some((result.objective, result.z));
        }
    }
    if !any_start_ok {
        return Err(GpError::Training(format!(
            "all {} restarts failed to produce a positive-definite Gram matrix for dimension {dim}",
            starts.len()
        )));
    }
    let (value, theta) = best.ok_or_else(|| GpError::Training(format!("no restart converged for dimension {dim}")))?;
    debug_assert!(value <= best_start_value + 1e-9);
    hp_from_log(&theta, n_in)
}

/// θ = (log σ_s², log σ_n², log Λ_11..) → hyperparameters.
fn hp_from_log(theta: &DVector<f64>, n_in: usize) -> Result<GpHyperparams, GpError> {
    if theta.iter().any(|t| !t.is_finite() || t.abs() > 60.0) {
        return Err(GpError::NonFinite("log-hyperparameters"));
    }
    GpHyperparams::new(
        theta[0].exp(),
        theta[1].exp(),
        (0..n_in).map(|i| theta[2 + i].exp()).collect(),
    )
}

/// Heuristic base point plus seeded log-space jitter for the restarts.
fn initial_points(dataset: &GpDataset, dim: usize, config: &TrainConfig) -> Vec<DVector<f64>> {
    let n_in = dataset.input_dim();
    let y = dataset.target_column(dim);
    let y_var = variance(y.as_slice()).max(1e-8);

    let mut base = DVector::zeros(2 + n_in);
    base[0] = y_var.ln();
    base[1] = (0.1 * y_var).ln();
    for c in 0..n_in {
        let col: Vec<f64> = (0..dataset.len()).map(|r| dataset.inputs[(r, c)]).collect();
        let span = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - col.iter().cloned().fold(f64::INFINITY, f64::min);
        let span = span.max(1e-3);
        // Λ weight ~ 1/span²: unit kernel decay across the data spread.
        base[2 + c] = (1.0 / (span * span)).ln();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (dim as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let mut points = vec![base.clone()];
    for _ in 1..config.restarts.max(1) {
        let jittered = DVector::from_iterator(
            base.len(),
            base.iter().map(|b| b + rng.gen_range(-1.5..1.5)),
        );
        points.push(jittered);
    }
    points
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}
