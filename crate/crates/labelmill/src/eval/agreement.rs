//! Inter-rater agreement over shared annotation sets: every pairwise
//! Cohen's kappa, their average, and the overall Fleiss' kappa.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::annotate::LabelAssignment;
use crate::error::{Error, Result};
use crate::eval::kappa::{cohen_kappa, fleiss_kappa, Kappa};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    /// `"raterA|raterB"` → Cohen's kappa, raters in sorted order.
    pub cohen_pairwise: BTreeMap<String, Kappa>,
    /// Mean over the defined pairwise kappas; absent if none are defined.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_pairwise_cohen: Option<f64>,
    pub fleiss_overall: Kappa,
    pub n_items: usize,
    pub n_raters: usize,
    /// How the average is taken, recorded so readers need not guess.
    pub note: String,
}

/// Compute agreement on primary labels across raters. Every rater must have
/// labeled exactly the same documents.
pub fn agreement_report(
    by_rater: &BTreeMap<String, Vec<LabelAssignment>>,
) -> Result<AgreementReport> {
    if by_rater.len() < 2 {
        return Err(Error::invalid(format!(
            "agreement needs at least 2 raters, got {}",
            by_rater.len()
        )));
    }

    // Align every rater on the same sorted document set.
    let mut doc_ids: Option<Vec<String>> = None;
    let mut sequences: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for (rater, assignments) in by_rater {
        let mut by_doc: BTreeMap<&str, u32> = BTreeMap::new();
        for a in assignments {
            if by_doc.insert(&a.doc_id, a.primary_index).is_some() {
                return Err(Error::invalid(format!(
                    "rater `{rater}` labeled `{}` more than once",
                    a.doc_id
                )));
            }
        }
        let ids: Vec<String> = by_doc.keys().map(|s| s.to_string()).collect();
        match &doc_ids {
            None => doc_ids = Some(ids),
            Some(expected) if *expected == ids => {}
            Some(_) => {
                return Err(Error::invalid(format!(
                    "rater `{rater}` labeled a different document set"
                )))
            }
        }
        sequences.insert(rater, by_doc.into_values().collect());
    }
    let doc_ids = doc_ids.expect("at least two raters");
    if doc_ids.is_empty() {
        return Err(Error::invalid("agreement over zero documents"));
    }

    let raters: Vec<&str> = sequences.keys().copied().collect();
    let mut cohen_pairwise = BTreeMap::new();
    let mut defined = Vec::new();
    for (i, a) in raters.iter().enumerate() {
        for b in &raters[i + 1..] {
            let kappa = cohen_kappa(&sequences[a], &sequences[b])?;
            if let Kappa::Defined(v) = kappa {
                defined.push(v);
            }
            cohen_pairwise.insert(format!("{a}|{b}"), kappa);
        }
    }
    let avg_pairwise_cohen = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    // Fleiss over the item × category count matrix.
    let categories: Vec<u32> = sequences
        .values()
        .flatten()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let slot: BTreeMap<u32, usize> = categories.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut counts = vec![vec![0usize; categories.len()]; doc_ids.len()];
    for seq in sequences.values() {
        for (item, &label) in seq.iter().enumerate() {
            counts[item][slot[&label]] += 1;
        }
    }
    let fleiss_overall = fleiss_kappa(&counts, raters.len())?;

    Ok(AgreementReport {
        cohen_pairwise,
        avg_pairwise_cohen,
        fleiss_overall,
        n_items: doc_ids.len(),
        n_raters: raters.len(),
        note: "avg_pairwise_cohen averages over rater pairs (defined kappas only)".to_string(),
    })
}
