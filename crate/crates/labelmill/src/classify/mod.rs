//! Lightweight classifiers distilled from pseudo-labeled embeddings:
//! multinomial logistic regression and a two-layer MLP for the primary label,
//! one-vs-all wrappers for multilabel targets, hyperparameter grid search,
//! and a flat binary persistence format shared with the clustering baseline.

pub mod grid;
pub mod linear;
pub mod mlp;
pub mod multilabel;
pub mod persist;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::annotate::LabelAssignment;
use crate::embed::EmbeddedDataset;
use crate::error::{Error, Result};

/// Which training family produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logit,
    Mlp,
}

/// Weight tensors, by family.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelWeights {
    /// `w` is K×dim, `b` is K. Bias kept separate so it can stay unregularized.
    Logit { w: Vec<Vec<f64>>, b: Vec<f64> },
    /// `w1` hidden×dim, `b1` hidden, `w2` K×hidden, `b2` K.
    Mlp {
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        w2: Vec<Vec<f64>>,
        b2: Vec<f64>,
    },
}

/// A trained multiclass classifier over a fixed, ordered set of label indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassModel {
    pub kind: ModelKind,
    pub dim: usize,
    /// Taxonomy label indices, ascending; class position p predicts `classes[p]`.
    pub classes: Vec<u32>,
    pub hyperparams: BTreeMap<String, f64>,
    pub weights: ModelWeights,
}

impl MulticlassModel {
    /// Structural invariants: ≥2 classes, consistent shapes, finite weights.
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid("multiclass model needs at least 2 classes"));
        }
        let k = self.classes.len();
        let all_finite = |rows: &[Vec<f64>], b: &[f64]| {
            rows.iter().flatten().chain(b.iter()).all(|v| v.is_finite())
        };
        match &self.weights {
            ModelWeights::Logit { w, b } => {
                if w.len() != k || b.len() != k || w.iter().any(|r| r.len() != self.dim) {
                    return Err(Error::invalid("logit weight shape mismatch"));
                }
                if !all_finite(w, b) {
                    return Err(Error::invalid("non-finite logit weights"));
                }
            }
            ModelWeights::Mlp { w1, b1, w2, b2 } => {
                let hidden = w1.len();
                if hidden == 0
                    || b1.len() != hidden
                    || w1.iter().any(|r| r.len() != self.dim)
                    || w2.len() != k
                    || b2.len() != k
                    || w2.iter().any(|r| r.len() != hidden)
                {
                    return Err(Error::invalid("mlp weight shape mismatch"));
                }
                if !all_finite(w1, b1) || !all_finite(w2, b2) {
                    return Err(Error::invalid("non-finite mlp weights"));
                }
            }
        }
        Ok(())
    }

    /// Raw class scores (pre-softmax logits) for one input row.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "input has dim {}, model expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(match &self.weights {
            ModelWeights::Logit { w, b } => w
                .iter()
                .zip(b)
                .map(|(row, bias)| dot(row, x) + bias)
                .collect(),
            ModelWeights::Mlp { w1, b1, w2, b2 } => {
                let h: Vec<f64> = w1
                    .iter()
                    .zip(b1)
                    .map(|(row, bias)| (dot(row, x) + bias).max(0.0))
                    .collect();
                w2.iter()
                    .zip(b2)
                    .map(|(row, bias)| dot(row, &h) + bias)
                    .collect()
            }
        })
    }

    /// Predicted label index and full probability vector (sums to 1 ± 1e-9).
    /// Ties go to the lowest class position, i.e. the lowest label index.
    pub fn predict(&self, x: &[f64]) -> Result<(u32, Vec<f64>)> {
        let mut probs = self.scores(x)?;
        softmax_in_place(&mut probs);
        let best = argmax_lowest(&probs);
        Ok((self.classes[best], probs))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// First maximum wins, so ties resolve to the lowest index.
pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Dense features with single-label targets, ready for multiclass training.
#[derive(Debug, Clone)]
pub struct LabeledMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Per-row positions into `classes`.
    pub targets: Vec<usize>,
    /// Distinct taxonomy label indices present, ascending.
    pub classes: Vec<u32>,
}

impl LabeledMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::invalid("empty training matrix"));
        }
        if self.targets.len() != self.rows.len() {
            return Err(Error::invalid("row/target count mismatch"));
        }
        let dim = self.dim();
        if dim == 0 || self.rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged or zero-width feature rows"));
        }
        if self.targets.iter().any(|&t| t >= self.classes.len()) {
            return Err(Error::invalid("target position out of class range"));
        }
        Ok(())
    }

    /// Joins embedded rows with primary-label assignments by document id.
    /// Every embedded document must carry exactly one assignment.
    pub fn from_assignments(
        embedded: &EmbeddedDataset,
        assignments: &[LabelAssignment],
    ) -> Result<Self> {
        let mut by_doc: BTreeMap<&str, u32> = BTreeMap::new();
        for a in assignments {
            if by_doc.insert(a.doc_id.as_str(), a.primary_index).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate assignment for document `{}`",
                    a.doc_id
                )));
            }
        }
        let mut primaries = Vec::with_capacity(embedded.len());
        for doc_id in &embedded.doc_ids {
            match by_doc.get(doc_id.as_str()) {
                Some(&p) => primaries.push(p),
                None => {
                    return Err(Error::invalid(format!(
                        "document `{doc_id}` is embedded but unlabeled"
                    )))
                }
            }
        }
        let classes: Vec<u32> = primaries.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let position: BTreeMap<u32, usize> =
            classes.iter().enumerate().map(|(p, &c)| (c, p)).collect();
        let data = LabeledMatrix {
            rows: embedded.matrix.clone(),
            targets: primaries.iter().map(|p| position[p]).collect(),
            classes,
        };
        data.validate()?;
        Ok(data)
    }
}

/// Fraction of rows whose predicted label index matches the target's.
pub fn accuracy(model: &MulticlassModel, data: &LabeledMatrix) -> Result<f64> {
    data.validate()?;
    let mut correct = 0usize;
    for (row, &target) in data.rows.iter().zip(&data.targets) {
        if model.predict(row)?.0 == data.classes[target] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.n() as f64)
}
