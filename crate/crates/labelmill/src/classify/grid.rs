//! Hyperparameter grid search scored by validation accuracy.
//!
//! Every grid point gets one full training run. A failed run marks the trial
//! as failed and excludes it from selection; ties go to the earlier grid
//! entry (strict improvement is required to displace the incumbent).

use std::collections::BTreeMap;

use serde::Serialize;

use crate::classify::linear::train_logit;
use crate::classify::mlp::{train_mlp, MlpConfig};
use crate::classify::{accuracy, LabeledMatrix, MulticlassModel};
use crate::error::{Error, Result};

/// The l2 strengths tried for logistic regression.
pub const LAMBDA_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
/// The hidden-layer widths tried for the MLP.
pub const HIDDEN_GRID: [usize; 4] = [32, 64, 128, 256];

#[derive(Debug, Clone, Serialize)]
pub struct GridTrial {
    pub hyperparams: BTreeMap<String, f64>,
    /// `None` marks a failed training run, excluded from selection.
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSearchResult {
    pub trials: Vec<GridTrial>,
    pub best: BTreeMap<String, f64>,
    pub best_accuracy: f64,
}

/// Generic driver: train each grid point, score it, keep the first maximum.
pub fn grid_search<H, M>(
    grid: &[H],
    describe: impl Fn(&H) -> BTreeMap<String, f64>,
    train: impl Fn(&H) -> Result<M>,
    score: impl Fn(&M) -> Result<f64>,
) -> Result<(GridSearchResult, M)> {
    if grid.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    let mut trials = Vec::with_capacity(grid.len());
    let mut best: Option<(BTreeMap<String, f64>, f64, M)> = None;
    for h in grid {
        let hyperparams = describe(h);
        let outcome = train(h).and_then(|model| Ok((score(&model)?, model)));
        match outcome {
            Ok((acc, model)) => {
                trials.push(GridTrial {
                    hyperparams: hyperparams.clone(),
                    validation_accuracy: Some(acc),
                });
                if best.as_ref().is_none_or(|(_, incumbent, _)| acc > *incumbent) {
                    best = Some((hyperparams, acc, model));
                }
            }
            Err(err) => {
                log::warn!("grid trial {hyperparams:?} failed: {err}");
                trials.push(GridTrial {
                    hyperparams,
                    validation_accuracy: None,
                });
            }
        }
    }
    let (best_params, best_accuracy, model) =
        best.ok_or_else(|| Error::invalid("every grid trial failed"))?;
    Ok((
        GridSearchResult {
            trials,
            best: best_params,
            best_accuracy,
        },
        model,
    ))
}

/// Logistic-regression grid over l2 strengths.
pub fn grid_search_logit(
    train: &LabeledMatrix,
    validation: &LabeledMatrix,
    lambdas: &[f64],
    seed: u64,
) -> Result<(GridSearchResult, MulticlassModel)> {
    grid_search(
        lambdas,
        |&lambda| BTreeMap::from([("lambda".to_string(), lambda)]),
        |&lambda| train_logit(train, lambda, seed),
        |model| accuracy(model, validation),
    )
}

/// MLP grid over hidden-layer widths.
pub fn grid_search_mlp(
    train: &LabeledMatrix,
    validation: &LabeledMatrix,
    hidden_sizes: &[usize],
    seed: u64,
) -> Result<(GridSearchResult, MulticlassModel)> {
    grid_search(
        hidden_sizes,
        |&hidden| BTreeMap::from([("hidden".to_string(), hidden as f64)]),
        |&hidden| train_mlp(train, Some(validation), &MlpConfig::new(hidden, seed)),
        |model| accuracy(model, validation),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn describe(v: &f64) -> BTreeMap<String, f64> {
        BTreeMap::from([("v".to_string(), *v)])
    }

    #[test]
    fn single_entry_grid_wins_by_default() {
        let (result, model) = grid_search(
            &[0.5],
            describe,
            |&v| Ok(v),
            |m: &f64| Ok(*m),
        )
        .unwrap();
        assert_eq!(result.best["v"], 0.5);
        assert_eq!(model, 0.5);
        assert_eq!(result.trials.len(), 1);
    }

    #[test]
    fn ties_go_to_the_first_entry() {
        let (result, _) = grid_search(
            &[1.0, 2.0, 3.0],
            describe,
            |&v| Ok(v),
            |_| Ok(0.9),
        )
        .unwrap();
        assert_eq!(result.best["v"], 1.0);
    }

    #[test]
    fn failed_trials_are_recorded_and_excluded() {
        let (result, model) = grid_search(
            &[1.0, 2.0, 3.0],
            describe,
            |&v| {
                if v == 1.0 {
                    Err(Error::invalid("boom"))
                } else {
                    Ok(v)
                }
            },
            |m: &f64| Ok(*m),
        )
        .unwrap();
        assert_eq!(result.trials[0].validation_accuracy, None);
        assert_eq!(result.best["v"], 3.0);
        assert_eq!(model, 3.0);
    }

    #[test]
    fn all_failures_and_empty_grids_are_errors() {
        let all_fail = grid_search(
            &[1.0],
            describe,
            |_| Err::<f64, _>(Error::invalid("boom")),
            |m| Ok(*m),
        );
        assert!(all_fail.is_err());
        let empty = grid_search(&[], describe, |&v| Ok(v), |m: &f64| Ok(*m));
        assert!(empty.is_err());
    }

    #[test]
    fn logit_grid_on_separable_data_reaches_perfect_validation() {
        let data = crate::classify::linear::separable_blobs();
        let (result, _) = grid_search_logit(&data, &data, &LAMBDA_GRID, 0).unwrap();
        assert_eq!(result.best_accuracy, 1.0);
        assert_eq!(result.trials.len(), 4);
    }
}
