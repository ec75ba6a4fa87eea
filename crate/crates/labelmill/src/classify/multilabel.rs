//! One-vs-all multilabel classification: one independent binary scorer per
//! taxonomy label, thresholded at 0.5 by default. A label with no positive
//! training example gets a constant-negative scorer (and all-positive labels
//! the mirror image), logged rather than failed, so one degenerate label
//! never sinks the rest of the model.

use std::collections::{BTreeMap, BTreeSet};

use crate::annotate::LabelAssignment;
use crate::classify::grid::{grid_search, GridSearchResult};
use crate::classify::linear::train_logit;
use crate::classify::mlp::{train_mlp, MlpConfig};
use crate::classify::{accuracy, LabeledMatrix, ModelKind, MulticlassModel};
use crate::embed::EmbeddedDataset;
use crate::error::{Error, Result};
use crate::taxonomy::{Taxonomy, OTHER_LABEL};

/// Which hyperparameter axis to sweep; the variant picks the model family.
#[derive(Debug, Clone)]
pub enum HyperGrid {
    /// Logistic regression over l2 strengths.
    Lambdas(Vec<f64>),
    /// MLP over hidden-layer widths.
    Hidden(Vec<usize>),
}

impl HyperGrid {
    pub fn kind(&self) -> ModelKind {
        match self {
            HyperGrid::Lambdas(_) => ModelKind::Logit,
            HyperGrid::Hidden(_) => ModelKind::Mlp,
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            HyperGrid::Lambdas(v) => v.is_empty(),
            HyperGrid::Hidden(v) => v.is_empty(),
        }
    }
}

/// Dense features with set-valued targets.
#[derive(Debug, Clone)]
pub struct MultilabelMatrix {
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<BTreeSet<u32>>,
    /// Labels a scorer will be trained for, ascending.
    pub label_indices: Vec<u32>,
}

impl MultilabelMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::invalid("empty multilabel matrix"));
        }
        if self.targets.len() != self.rows.len() {
            return Err(Error::invalid("row/target count mismatch"));
        }
        let dim = self.dim();
        if dim == 0 || self.rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged or zero-width feature rows"));
        }
        if self.label_indices.is_empty() {
            return Err(Error::invalid("no labels to train scorers for"));
        }
        Ok(())
    }

    /// Joins embedded rows with full label sets; the scorer universe is the
    /// taxonomy's labels, minus Other unless `include_other` is set.
    pub fn from_assignments(
        embedded: &EmbeddedDataset,
        assignments: &[LabelAssignment],
        taxonomy: &Taxonomy,
        include_other: bool,
    ) -> Result<Self> {
        let mut by_doc: BTreeMap<&str, &BTreeSet<u32>> = BTreeMap::new();
        for a in assignments {
            if by_doc.insert(a.doc_id.as_str(), &a.all_indices).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate assignment for document `{}`",
                    a.doc_id
                )));
            }
        }
        let mut targets = Vec::with_capacity(embedded.len());
        for doc_id in &embedded.doc_ids {
            match by_doc.get(doc_id.as_str()) {
                Some(set) => targets.push((*set).clone()),
                None => {
                    return Err(Error::invalid(format!(
                        "document `{doc_id}` is embedded but unlabeled"
                    )))
                }
            }
        }
        let label_indices: Vec<u32> = taxonomy
            .labels
            .iter()
            .filter(|l| include_other || !l.name.eq_ignore_ascii_case(OTHER_LABEL))
            .map(|l| l.index)
            .collect();
        let data = MultilabelMatrix {
            rows: embedded.matrix.clone(),
            targets,
            label_indices,
        };
        data.validate()?;
        Ok(data)
    }

    /// Binary view for one label: class position 1 means "label present".
    fn binary_view(&self, label: u32) -> LabeledMatrix {
        LabeledMatrix {
            rows: self.rows.clone(),
            targets: self
                .targets
                .iter()
                .map(|set| usize::from(set.contains(&label)))
                .collect(),
            classes: vec![0, 1],
        }
    }
}

/// A per-label scorer: a real binary model, or a degenerate constant.
#[derive(Debug, Clone, PartialEq)]
pub enum BinaryScorer {
    ConstantNegative,
    ConstantPositive,
    Model(MulticlassModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilabelModel {
    pub kind: ModelKind,
    pub dim: usize,
    pub threshold: f64,
    pub per_label: BTreeMap<u32, BinaryScorer>,
}

impl MultilabelModel {
    /// Probability-like score in [0, 1] that `label` applies to `x`.
    pub fn score(&self, label: u32, x: &[f64]) -> Result<f64> {
        match self.per_label.get(&label) {
            None => Err(Error::invalid(format!("no scorer for label {label}"))),
            Some(BinaryScorer::ConstantNegative) => Ok(0.0),
            Some(BinaryScorer::ConstantPositive) => Ok(1.0),
            Some(BinaryScorer::Model(m)) => Ok(m.predict(x)?.1[1]),
        }
    }

    /// Every label whose score clears the threshold. Each label's decision
    /// depends only on its own scorer.
    pub fn predict(&self, x: &[f64]) -> Result<BTreeSet<u32>> {
        let mut out = BTreeSet::new();
        for &label in self.per_label.keys() {
            if self.score(label, x)? >= self.threshold {
                out.insert(label);
            }
        }
        Ok(out)
    }
}

/// Per-label grid searches (the trials for each label's scorer).
pub type MultilabelTrials = BTreeMap<u32, GridSearchResult>;

fn train_binary(
    train: &LabeledMatrix,
    validation: Option<&LabeledMatrix>,
    grid: &HyperGrid,
    seed: u64,
) -> Result<(Option<GridSearchResult>, MulticlassModel)> {
    match (grid, validation) {
        (HyperGrid::Lambdas(lambdas), Some(val)) => {
            let (result, model) = grid_search(
                lambdas,
                |&l| BTreeMap::from([("lambda".to_string(), l)]),
                |&l| train_logit(train, l, seed),
                |m| accuracy(m, val),
            )?;
            Ok((Some(result), model))
        }
        (HyperGrid::Hidden(sizes), Some(val)) => {
            let (result, model) = grid_search(
                sizes,
                |&h| BTreeMap::from([("hidden".to_string(), h as f64)]),
                |&h| train_mlp(train, Some(val), &MlpConfig::new(h, seed)),
                |m| accuracy(m, val),
            )?;
            Ok((Some(result), model))
        }
        // No validation set: take the first grid entry outright.
        (HyperGrid::Lambdas(lambdas), None) => {
            Ok((None, train_logit(train, lambdas[0], seed)?))
        }
        (HyperGrid::Hidden(sizes), None) => Ok((
            None,
            train_mlp(train, None, &MlpConfig::new(sizes[0], seed))?,
        )),
    }
}

/// Trains one scorer per label in `train.label_indices`.
pub fn train_multilabel(
    train: &MultilabelMatrix,
    validation: Option<&MultilabelMatrix>,
    grid: &HyperGrid,
    seed: u64,
) -> Result<(MultilabelModel, MultilabelTrials)> {
    train.validate()?;
    if grid.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    if let Some(val) = validation {
        val.validate()?;
        if val.dim() != train.dim() {
            return Err(Error::invalid("validation dim differs from training dim"));
        }
    }

    let mut per_label = BTreeMap::new();
    let mut trials = MultilabelTrials::new();
    for &label in &train.label_indices {
        let positives = train.targets.iter().filter(|s| s.contains(&label)).count();
        if positives == 0 {
            log::warn!("label {label} has no positive examples; using constant-negative scorer");
            per_label.insert(label, BinaryScorer::ConstantNegative);
            continue;
        }
        if positives == train.n() {
            log::warn!("label {label} has no negative examples; using constant-positive scorer");
            per_label.insert(label, BinaryScorer::ConstantPositive);
            continue;
        }
        let binary_train = train.binary_view(label);
        let binary_val = validation.map(|v| v.binary_view(label));
        let (result, model) = train_binary(&binary_train, binary_val.as_ref(), grid, seed)?;
        if let Some(result) = result {
            trials.insert(label, result);
        }
        per_label.insert(label, BinaryScorer::Model(model));
    }
    Ok((
        MultilabelModel {
            kind: grid.kind(),
            dim: train.dim(),
            threshold: 0.5,
            per_label,
        },
        trials,
    ))
}
