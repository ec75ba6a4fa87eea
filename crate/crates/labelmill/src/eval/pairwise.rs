//! Rater-facing evaluation tasks: pairwise label accuracy and binary label
//! relevance.
//!
//! A pairwise task shows a document with its assigned label and a random
//! non-Other negative; the rater picks the better fit (or `none`). Each task
//! is replicated over an even number of runs with the two presentation
//! orders split exactly in half, so position preference cancels by
//! construction instead of in expectation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use std::collections::BTreeMap;

use crate::annotate::PseudoLabeledDataset;
use crate::error::{Error, Result};
use crate::gateway::PairChoice;
use crate::taxonomy::{Label, OTHER_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    PosFirst,
    NegFirst,
}

/// One pairwise instance: a document, its positive label, one negative, and
/// the order the two are shown in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseTask {
    pub task_id: String,
    pub doc_id: String,
    pub positive: Label,
    pub negative: Label,
    pub presentation_order: Position,
    pub allow_none: bool,
}

/// One rater's answer to one pairwise instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RaterResponse {
    pub task_id: String,
    pub rater_id: String,
    pub choice: PairChoice,
}

/// Pairwise tasks plus the documents skipped because their primary is Other.
#[derive(Debug, Clone)]
pub struct PairwiseTaskSet {
    pub tasks: Vec<PairwiseTask>,
    pub skipped_doc_ids: Vec<String>,
}

/// Build the balanced pairwise task set: one uniformly drawn non-Other
/// negative per document, replicated `runs` times with exactly `runs/2`
/// pos-first presentations.
pub fn make_pairwise_tasks(
    ds: &PseudoLabeledDataset,
    seed: u64,
    runs: u32,
) -> Result<PairwiseTaskSet> {
    if runs < 2 || runs % 2 != 0 {
        return Err(Error::invalid(format!(
            "position balancing needs an even number of runs ≥ 2, got {runs}"
        )));
    }
    let eligible: Vec<&Label> = ds
        .taxonomy
        .labels
        .iter()
        .filter(|l| !l.name.eq_ignore_ascii_case(OTHER_LABEL))
        .collect();
    if eligible.len() < 2 {
        return Err(Error::invalid(format!(
            "pairwise tasks need at least 2 non-Other labels, taxonomy has {}",
            eligible.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    let mut skipped_doc_ids = Vec::new();
    for assignment in &ds.assignments {
        let positive = ds
            .taxonomy
            .label_at(assignment.primary_index)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "{}: primary index {} not in taxonomy",
                    assignment.doc_id, assignment.primary_index
                ))
            })?
            .clone();
        if positive.name.eq_ignore_ascii_case(OTHER_LABEL) {
            log::info!("{}: primary is Other, skipping pairwise task", assignment.doc_id);
            skipped_doc_ids.push(assignment.doc_id.clone());
            continue;
        }
        let candidates: Vec<&&Label> = eligible
            .iter()
            .filter(|l| l.index != positive.index)
            .collect();
        let negative = (**candidates
            .get(rng.random_range(0..candidates.len()))
            .expect("at least one candidate: eligible ≥ 2 and positive removed"))
        .clone();
        for run in 0..runs {
            tasks.push(PairwiseTask {
                task_id: format!("{}#r{run}", assignment.doc_id),
                doc_id: assignment.doc_id.clone(),
                positive: positive.clone(),
                negative: negative.clone(),
                presentation_order: if run % 2 == 0 {
                    Position::PosFirst
                } else {
                    Position::NegFirst
                },
                allow_none: true,
            });
        }
    }
    Ok(PairwiseTaskSet {
        tasks,
        skipped_doc_ids,
    })
}

fn index_responses<'a, T>(
    responses: &'a [T],
    task_id: impl Fn(&'a T) -> &'a str,
    task_ids: &[&str],
) -> Result<BTreeMap<&'a str, &'a T>> {
    let mut by_task: BTreeMap<&str, &T> = BTreeMap::new();
    for response in responses {
        let id = task_id(response);
        if by_task.insert(id, response).is_some() {
            return Err(Error::invalid(format!("duplicate response for task `{id}`")));
        }
    }
    let missing: Vec<&str> = task_ids
        .iter()
        .filter(|id| !by_task.contains_key(**id))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "missing responses for {} tasks: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(by_task)
}

/// Fraction of instances where the rater picked the positive label; `none`
/// counts as a miss. Exactly one response per task instance is required.
pub fn hit_rate(tasks: &[PairwiseTask], responses: &[RaterResponse]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::invalid("hit rate over zero tasks"));
    }
    let ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    let by_task = index_responses(responses, |r| r.task_id.as_str(), &ids)?;
    let hits = tasks
        .iter()
        .filter(|task| {
            let choice = by_task[task.task_id.as_str()].choice;
            matches!(
                (task.presentation_order, choice),
                (Position::PosFirst, PairChoice::First) | (Position::NegFirst, PairChoice::Second)
            )
        })
        .count();
    Ok(hits as f64 / tasks.len() as f64)
}

/// One binary relevance instance: is this label a fair description of the
/// document?
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelevanceTask {
    pub task_id: String,
    pub doc_id: String,
    pub label: Label,
}

/// One rater's relevance verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelevanceResponse {
    pub task_id: String,
    pub rater_id: String,
    pub relevant: bool,
}

/// One relevance task per assignment whose primary is not Other.
pub fn make_relevance_tasks(ds: &PseudoLabeledDataset) -> Result<Vec<RelevanceTask>> {
    let mut tasks = Vec::new();
    for assignment in &ds.assignments {
        let label = ds
            .taxonomy
            .label_at(assignment.primary_index)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "{}: primary index {} not in taxonomy",
                    assignment.doc_id, assignment.primary_index
                ))
            })?;
        if label.name.eq_ignore_ascii_case(OTHER_LABEL) {
            continue;
        }
        tasks.push(RelevanceTask {
            task_id: format!("{}#rel", assignment.doc_id),
            doc_id: assignment.doc_id.clone(),
            label: label.clone(),
        });
    }
    Ok(tasks)
}

/// Fraction of tasks rated relevant; one response per task.
pub fn relevance_rate(tasks: &[RelevanceTask], responses: &[RelevanceResponse]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::invalid("relevance rate over zero tasks"));
    }
    let ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    let by_task = index_responses(responses, |r| r.task_id.as_str(), &ids)?;
    let relevant = tasks
        .iter()
        .filter(|t| by_task[t.task_id.as_str()].relevant)
        .count();
    Ok(relevant as f64 / tasks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{AssignmentSource, LabelAssignment};
    use crate::taxonomy::{inject_other, Taxonomy};
    use std::collections::BTreeSet;

    fn dataset(primaries: &[u32]) -> PseudoLabeledDataset {
        let tax = inject_other(&Taxonomy::new(
            vec![
                Label::new(1, "Billing", "Payments."),
                Label::new(2, "Shipping", "Parcels."),
                Label::new(3, "Account", "Sign-in."),
            ],
            "uc",
        ));
        let assignments = primaries
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let name = tax.label_at(p).unwrap().name.clone();
                LabelAssignment::new(
                    &format!("d{i}"),
                    p,
                    &name,
                    BTreeSet::from([p]),
                    AssignmentSource::Llm,
                    "r",
                )
            })
            .collect();
        PseudoLabeledDataset {
            taxonomy: tax,
            assignments,
            split_assignment: BTreeMap::new(),
        }
    }

    #[test]
    fn four_runs_give_a_balanced_schedule() {
        let ds = dataset(&[1, 2, 3]);
        let set = make_pairwise_tasks(&ds, 7, 4).unwrap();
        assert_eq!(set.tasks.len(), 12);
        for doc in ["d0", "d1", "d2"] {
            let doc_tasks: Vec<&PairwiseTask> =
                set.tasks.iter().filter(|t| t.doc_id == doc).collect();
            assert_eq!(doc_tasks.len(), 4);
            let pos_first = doc_tasks
                .iter()
                .filter(|t| t.presentation_order == Position::PosFirst)
                .count();
            assert_eq!(pos_first, 2);
            // One negative per document, shared across its runs.
            assert!(doc_tasks.windows(2).all(|w| w[0].negative == w[1].negative));
            assert_ne!(doc_tasks[0].negative.index, doc_tasks[0].positive.index);
            assert_ne!(doc_tasks[0].negative.name, OTHER_LABEL);
        }
        // Same seed, same tasks.
        let again = make_pairwise_tasks(&ds, 7, 4).unwrap();
        assert_eq!(set.tasks, again.tasks);
    }

    #[test]
    fn two_label_taxonomy_forces_the_negative() {
        let tax = inject_other(&Taxonomy::new(
            vec![
                Label::new(1, "Billing", "Payments."),
                Label::new(2, "Shipping", "Parcels."),
            ],
            "uc",
        ));
        let ds = PseudoLabeledDataset {
            assignments: vec![LabelAssignment::new(
                "d0",
                1,
                "Billing",
                BTreeSet::from([1]),
                AssignmentSource::Llm,
                "r",
            )],
            taxonomy: tax,
            split_assignment: BTreeMap::new(),
        };
        let set = make_pairwise_tasks(&ds, 0, 2).unwrap();
        assert!(set.tasks.iter().all(|t| t.negative.index == 2));
    }

    #[test]
    fn other_primaries_are_skipped_with_a_record() {
        let ds = dataset(&[1, 4, 2]); // index 4 is the injected Other
        let set = make_pairwise_tasks(&ds, 3, 2).unwrap();
        assert_eq!(set.tasks.len(), 4);
        assert_eq!(set.skipped_doc_ids, vec!["d1".to_string()]);
    }

    #[test]
    fn runs_must_be_even_and_labels_sufficient() {
        let ds = dataset(&[1]);
        assert!(make_pairwise_tasks(&ds, 0, 3).is_err());
        assert!(make_pairwise_tasks(&ds, 0, 0).is_err());

        let one_label = PseudoLabeledDataset {
            taxonomy: inject_other(&Taxonomy::new(vec![Label::new(1, "Only", "x")], "uc")),
            assignments: vec![],
            split_assignment: BTreeMap::new(),
        };
        assert!(make_pairwise_tasks(&one_label, 0, 2).is_err());
    }

    fn respond_all(tasks: &[PairwiseTask], f: impl Fn(&PairwiseTask) -> PairChoice) -> Vec<RaterResponse> {
        tasks
            .iter()
            .map(|t| RaterResponse {
                task_id: t.task_id.clone(),
                rater_id: "r".to_string(),
                choice: f(t),
            })
            .collect()
    }

    #[test]
    fn perfect_rater_hits_everything() {
        let ds = dataset(&[1, 2, 3, 1]);
        let set = make_pairwise_tasks(&ds, 5, 2).unwrap();
        let responses = respond_all(&set.tasks, |t| match t.presentation_order {
            Position::PosFirst => PairChoice::First,
            Position::NegFirst => PairChoice::Second,
        });
        assert_eq!(hit_rate(&set.tasks, &responses).unwrap(), 1.0);
    }

    #[test]
    fn always_first_rater_scores_exactly_half() {
        let ds = dataset(&[1, 2, 3, 1, 2]);
        let set = make_pairwise_tasks(&ds, 5, 4).unwrap();
        let responses = respond_all(&set.tasks, |_| PairChoice::First);
        assert_eq!(hit_rate(&set.tasks, &responses).unwrap(), 0.5);
    }

    #[test]
    fn none_answers_are_misses() {
        let ds = dataset(&[1, 2]);
        let set = make_pairwise_tasks(&ds, 5, 2).unwrap();
        let responses = respond_all(&set.tasks, |_| PairChoice::Neither);
        assert_eq!(hit_rate(&set.tasks, &responses).unwrap(), 0.0);
    }

    #[test]
    fn missing_and_duplicate_responses_are_errors() {
        let ds = dataset(&[1, 2]);
        let set = make_pairwise_tasks(&ds, 5, 2).unwrap();
        let mut responses = respond_all(&set.tasks, |_| PairChoice::First);
        let dropped = responses.pop().unwrap();
        let err = hit_rate(&set.tasks, &responses).unwrap_err();
        assert!(err.to_string().contains(&dropped.task_id), "{err}");

        responses.push(dropped.clone());
        responses.push(dropped);
        assert!(hit_rate(&set.tasks, &responses).is_err());
    }

    #[test]
    fn relevance_fraction() {
        let ds = dataset(&[1, 2, 3, 1]);
        let tasks = make_relevance_tasks(&ds).unwrap();
        assert_eq!(tasks.len(), 4);
        let responses: Vec<RelevanceResponse> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| RelevanceResponse {
                task_id: t.task_id.clone(),
                rater_id: "r".to_string(),
                relevant: i != 0,
            })
            .collect();
        assert_eq!(relevance_rate(&tasks, &responses).unwrap(), 0.75);
    }
}
