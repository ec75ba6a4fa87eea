//! Two-layer perceptron (affine → ReLU → affine → softmax) trained with Adam.
//!
//! Weight decay enters the loss as an explicit l2 term on both weight
//! matrices (biases excluded), so the analytic gradient — Adam's input — is
//! exactly the gradient of `mlp_loss` and central finite differences can
//! verify it. Training runs at most 200 epochs of seeded-shuffle minibatches
//! with early stopping on validation accuracy (patience 20); the best
//! validation snapshot is what the returned model carries.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classify::{dot, softmax_in_place, LabeledMatrix, ModelKind, ModelWeights, MulticlassModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(hidden: usize, seed: u64) -> Self {
        MlpConfig {
            hidden,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            seed,
        }
    }
}

// Flat layout: w1 row-major (hidden×dim), b1 (hidden), w2 row-major
// (k×hidden), b2 (k).

pub fn mlp_param_count(k: usize, dim: usize, hidden: usize) -> usize {
    hidden * dim + hidden + k * hidden + k
}

struct Shape {
    k: usize,
    dim: usize,
    hidden: usize,
}

impl Shape {
    fn b1(&self) -> usize {
        self.hidden * self.dim
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.k * self.hidden
    }
}

fn forward(params: &[f64], x: &[f64], s: &Shape) -> (Vec<f64>, Vec<f64>) {
    let mut h = Vec::with_capacity(s.hidden);
    for j in 0..s.hidden {
        let row = &params[j * s.dim..(j + 1) * s.dim];
        h.push((dot(row, x) + params[s.b1() + j]).max(0.0));
    }
    let mut z = Vec::with_capacity(s.k);
    for c in 0..s.k {
        let row = &params[s.w2() + c * s.hidden..s.w2() + (c + 1) * s.hidden];
        z.push(dot(row, &h) + params[s.b2() + c]);
    }
    (h, z)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn penalty(params: &[f64], s: &Shape, weight_decay: f64) -> f64 {
    let w1 = &params[..s.b1()];
    let w2 = &params[s.w2()..s.b2()];
    0.5 * weight_decay
        * (w1.iter().map(|v| v * v).sum::<f64>() + w2.iter().map(|v| v * v).sum::<f64>())
}

fn loss_indices(
    params: &[f64],
    data: &LabeledMatrix,
    idx: &[usize],
    s: &Shape,
    weight_decay: f64,
) -> f64 {
    let mut total = 0.0;
    for &i in idx {
        let (_, z) = forward(params, &data.rows[i], s);
        total += log_sum_exp(&z) - z[data.targets[i]];
    }
    total / idx.len() as f64 + penalty(params, s, weight_decay)
}

fn gradient_indices(
    params: &[f64],
    data: &LabeledMatrix,
    idx: &[usize],
    s: &Shape,
    weight_decay: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    let scale = 1.0 / idx.len() as f64;
    for &i in idx {
        let x = &data.rows[i];
        let (h, mut p) = forward(params, x, s);
        softmax_in_place(&mut p);
        let y = data.targets[i];
        let mut dh = vec![0.0; s.hidden];
        for c in 0..s.k {
            let dz = (p[c] - if c == y { 1.0 } else { 0.0 }) * scale;
            grad[s.b2() + c] += dz;
            let w2_row = s.w2() + c * s.hidden;
            for j in 0..s.hidden {
                grad[w2_row + j] += dz * h[j];
                dh[j] += dz * params[w2_row + j];
            }
        }
        for j in 0..s.hidden {
            // ReLU gate: h[j] > 0 iff the pre-activation was positive.
            if h[j] > 0.0 {
                for (g, xv) in grad[j * s.dim..(j + 1) * s.dim].iter_mut().zip(x) {
                    *g += dh[j] * xv;
                }
                grad[s.b1() + j] += dh[j];
            }
        }
    }
    for (g, w) in grad[..s.b1()].iter_mut().zip(&params[..s.b1()]) {
        *g += weight_decay * w;
    }
    for i in s.w2()..s.b2() {
        grad[i] += weight_decay * params[i];
    }
    grad
}

/// Full-batch loss in the public flat layout, for gradient verification.
pub fn mlp_loss(params: &[f64], data: &LabeledMatrix, hidden: usize, weight_decay: f64) -> f64 {
    let s = Shape {
        k: data.k(),
        dim: data.dim(),
        hidden,
    };
    let idx: Vec<usize> = (0..data.n()).collect();
    loss_indices(params, data, &idx, &s, weight_decay)
}

/// Analytic full-batch gradient of [`mlp_loss`].
pub fn mlp_gradient(
    params: &[f64],
    data: &LabeledMatrix,
    hidden: usize,
    weight_decay: f64,
) -> Vec<f64> {
    let s = Shape {
        k: data.k(),
        dim: data.dim(),
        hidden,
    };
    let idx: Vec<usize> = (0..data.n()).collect();
    gradient_indices(params, data, &idx, &s, weight_decay)
}

fn xavier_init(s: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut params = vec![0.0; mlp_param_count(s.k, s.dim, s.hidden)];
    let limit1 = (6.0 / (s.dim + s.hidden) as f64).sqrt();
    for v in params[..s.b1()].iter_mut() {
        *v = rng.random_range(-limit1..limit1);
    }
    let limit2 = (6.0 / (s.hidden + s.k) as f64).sqrt();
    let (w2, b2) = (s.w2(), s.b2());
    for v in params[w2..b2].iter_mut() {
        *v = rng.random_range(-limit2..limit2);
    }
    params
}

fn unpack(params: &[f64], s: &Shape) -> ModelWeights {
    ModelWeights::Mlp {
        w1: (0..s.hidden)
            .map(|j| params[j * s.dim..(j + 1) * s.dim].to_vec())
            .collect(),
        b1: params[s.b1()..s.w2()].to_vec(),
        w2: (0..s.k)
            .map(|c| params[s.w2() + c * s.hidden..s.w2() + (c + 1) * s.hidden].to_vec())
            .collect(),
        b2: params[s.b2()..].to_vec(),
    }
}

fn flat_accuracy(params: &[f64], s: &Shape, model_classes: &[u32], data: &LabeledMatrix) -> f64 {
    let mut correct = 0usize;
    for (row, &t) in data.rows.iter().zip(&data.targets) {
        let (_, z) = forward(params, row, s);
        let best = crate::classify::argmax_lowest(&z);
        if model_classes[best] == data.classes[t] {
            correct += 1;
        }
    }
    correct as f64 / data.n() as f64
}

/// Trains the two-layer network. With `validation` present, epochs stop early
/// after `patience` epochs without a strict accuracy improvement and the best
/// snapshot is restored; without it, all epochs run.
pub fn train_mlp(
    train: &LabeledMatrix,
    validation: Option<&LabeledMatrix>,
    config: &MlpConfig,
) -> Result<MulticlassModel> {
    train.validate()?;
    if train.k() < 2 {
        return Err(Error::invalid(
            "mlp training needs at least 2 distinct labels",
        ));
    }
    if config.hidden == 0 {
        return Err(Error::invalid("hidden layer width must be positive"));
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::invalid("batch size and epoch budget must be positive"));
    }
    if let Some(val) = validation {
        val.validate()?;
        if val.dim() != train.dim() {
            return Err(Error::invalid("validation dim differs from training dim"));
        }
    }

    let s = Shape {
        k: train.k(),
        dim: train.dim(),
        hidden: config.hidden,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = xavier_init(&s, &mut rng);

    // Adam state.
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut step = 0u32;

    let mut order: Vec<usize> = (0..train.n()).collect();
    let mut best_snapshot: Option<(f64, Vec<f64>)> = None;
    let mut strikes = 0usize;

    for _ in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let grad = gradient_indices(&params, train, batch, &s, config.weight_decay);
            step += 1;
            let bc1 = 1.0 - beta1.powi(step as i32);
            let bc2 = 1.0 - beta2.powi(step as i32);
            for i in 0..params.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                params[i] -= config.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        if let Some(val) = validation {
            let acc = flat_accuracy(&params, &s, &train.classes, val);
            let improved = best_snapshot.as_ref().is_none_or(|(best, _)| acc > *best);
            if improved {
                best_snapshot = Some((acc, params.clone()));
                strikes = 0;
            } else {
                strikes += 1;
                if strikes >= config.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snapshot)) = best_snapshot {
        params = snapshot;
    }

    let model = MulticlassModel {
        kind: ModelKind::Mlp,
        dim: s.dim,
        classes: train.classes.clone(),
        hyperparams: BTreeMap::from([
            ("hidden".to_string(), config.hidden as f64),
            ("batch_size".to_string(), config.batch_size as f64),
            ("learning_rate".to_string(), config.learning_rate),
            ("weight_decay".to_string(), config.weight_decay),
            ("seed".to_string(), config.seed as f64),
        ]),
        weights: unpack(&params, &s),
    };
    model.validate()?;
    Ok(model)
}
