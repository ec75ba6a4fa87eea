//! Multinomial logistic regression trained by deterministic full-batch
//! gradient descent with Armijo backtracking line search.
//!
//! The loss is mean cross-entropy plus `0.5 * lambda * ||W||^2` with the bias
//! column left unregularized — that way an overwhelming penalty drives the
//! weights to zero while the biases still fit the class prior. The flat
//! parameter layout is public (`logit_loss` / `logit_gradient`) so tests can
//! check the analytic gradient against central finite differences.

use std::collections::BTreeMap;

use crate::classify::{dot, LabeledMatrix, ModelKind, ModelWeights, MulticlassModel};
use crate::error::{Error, Result};

pub const GRAD_NORM_TOL: f64 = 1e-5;
pub const MAX_ITERS: usize = 2000;

// Flat layout: per class position k, dim weights then one bias, so
// params[k*(dim+1) .. k*(dim+1)+dim] are weights and the next slot is bias.

pub fn logit_param_count(k: usize, dim: usize) -> usize {
    k * (dim + 1)
}

fn class_scores(params: &[f64], x: &[f64], k: usize, dim: usize) -> Vec<f64> {
    (0..k)
        .map(|c| {
            let base = c * (dim + 1);
            dot(&params[base..base + dim], x) + params[base + dim]
        })
        .collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over `data` plus the l2 penalty on weights (not biases).
pub fn logit_loss(params: &[f64], data: &LabeledMatrix, lambda: f64) -> f64 {
    let (k, dim, n) = (data.k(), data.dim(), data.n());
    debug_assert_eq!(params.len(), logit_param_count(k, dim));
    let mut total = 0.0;
    for (x, &y) in data.rows.iter().zip(&data.targets) {
        let z = class_scores(params, x, k, dim);
        total += log_sum_exp(&z) - z[y];
    }
    let mut penalty = 0.0;
    for c in 0..k {
        let base = c * (dim + 1);
        penalty += params[base..base + dim].iter().map(|w| w * w).sum::<f64>();
    }
    total / n as f64 + 0.5 * lambda * penalty
}

/// Analytic gradient of [`logit_loss`] in the same flat layout.
pub fn logit_gradient(params: &[f64], data: &LabeledMatrix, lambda: f64) -> Vec<f64> {
    let (k, dim, n) = (data.k(), data.dim(), data.n());
    let mut grad = vec![0.0; params.len()];
    for (x, &y) in data.rows.iter().zip(&data.targets) {
        let mut p = class_scores(params, x, k, dim);
        crate::classify::softmax_in_place(&mut p);
        for c in 0..k {
            let delta = (p[c] - if c == y { 1.0 } else { 0.0 }) / n as f64;
            let base = c * (dim + 1);
            for (g, xv) in grad[base..base + dim].iter_mut().zip(x) {
                *g += delta * xv;
            }
            grad[base + dim] += delta;
        }
    }
    for c in 0..k {
        let base = c * (dim + 1);
        for (g, w) in grad[base..base + dim].iter_mut().zip(&params[base..base + dim]) {
            *g += lambda * w;
        }
    }
    grad
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Trains and also returns the loss after every accepted step (starting with
/// the initial loss); the sequence is non-increasing by construction.
pub fn train_logit_with_trace(
    data: &LabeledMatrix,
    lambda: f64,
    seed: u64,
) -> Result<(MulticlassModel, Vec<f64>)> {
    data.validate()?;
    if data.k() < 2 {
        return Err(Error::invalid(
            "logit training needs at least 2 distinct labels",
        ));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::invalid("lambda must be finite and non-negative"));
    }
    let (k, dim) = (data.k(), data.dim());
    // The objective is convex; a zero start makes the run deterministic
    // without any use of the seed beyond recording it.
    let mut params = vec![0.0; logit_param_count(k, dim)];
    let mut loss = logit_loss(&params, data, lambda);
    let mut trace = vec![loss];

    for _ in 0..MAX_ITERS {
        let grad = logit_gradient(&params, data, lambda);
        let gnorm = l2_norm(&grad);
        if gnorm < GRAD_NORM_TOL {
            break;
        }
        // Armijo backtracking: accept the first halved step with sufficient
        // decrease; bail out if even a tiny step fails to improve.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate: Vec<f64> = params
                .iter()
                .zip(&grad)
                .map(|(p, g)| p - step * g)
                .collect();
            let new_loss = logit_loss(&candidate, data, lambda);
            if new_loss <= loss - 1e-4 * step * gnorm * gnorm {
                accepted = Some((candidate, new_loss));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((candidate, new_loss)) => {
                params = candidate;
                loss = new_loss;
                trace.push(loss);
            }
            None => {
                log::debug!("line search stalled at gradient norm {gnorm:.3e}");
                break;
            }
        }
    }

    let w: Vec<Vec<f64>> = (0..k)
        .map(|c| params[c * (dim + 1)..c * (dim + 1) + dim].to_vec())
        .collect();
    let b: Vec<f64> = (0..k).map(|c| params[c * (dim + 1) + dim]).collect();
    let model = MulticlassModel {
        kind: ModelKind::Logit,
        dim,
        classes: data.classes.clone(),
        hyperparams: BTreeMap::from([
            ("lambda".to_string(), lambda),
            ("seed".to_string(), seed as f64),
        ]),
        weights: ModelWeights::Logit { w, b },
    };
    model.validate()?;
    Ok((model, trace))
}

/// Full-batch multinomial logit; see [`train_logit_with_trace`].
pub fn train_logit(data: &LabeledMatrix, lambda: f64, seed: u64) -> Result<MulticlassModel> {
    train_logit_with_trace(data, lambda, seed).map(|(model, _)| model)
}

/// Two 2-D blobs around (-2, 0) and (2, 0) with offsets inside ±0.5, so the
/// separator w=(1,0), b=0 has margin ≥ 1.5 on every point. Shared test data.
#[cfg(test)]
pub(crate) fn separable_blobs() -> LabeledMatrix {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for class in 0..2usize {
        let cx = if class == 0 { -2.0 } else { 2.0 };
        for _ in 0..20 {
            let dx: f64 = rng.random_range(-0.5..0.5);
            let dy: f64 = rng.random_range(-0.5..0.5);
            rows.push(vec![cx + dx, dy]);
            targets.push(class);
        }
    }
    let data = LabeledMatrix {
        rows,
        targets,
        classes: vec![1, 2],
    };
    // Exhaustive margin check against the known separator: every class-2
    // point has x ≥ 1.5, every class-1 point has x ≤ -1.5.
    for (row, &t) in data.rows.iter().zip(&data.targets) {
        let signed = if t == 1 { row[0] } else { -row[0] };
        assert!(signed >= 1.0, "blob construction lost its margin");
    }
    data
}
