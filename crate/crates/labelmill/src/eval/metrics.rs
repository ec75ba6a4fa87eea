//! Multiclass and multilabel classification metrics with confusion matrices.
//!
//! Zero-division cases (a class never predicted, never present, or both)
//! score 0.0 by convention. All ratios are computed directly from integer
//! counts so algebraically equal metrics are bit-equal — in particular,
//! single-label micro-F1 equals accuracy exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::annotate::LabelAssignment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    Primary,
    AllLabels,
}

/// Precision / recall / F1 with the supporting item count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

fn prf_from_counts(tp: usize, fp: usize, fn_: usize, support: usize) -> Prf {
    Prf {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        // Integer form keeps F1 bit-equal to algebraically equal ratios.
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        support,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub mode: ReportMode,
    pub n_items: usize,
    /// Primary mode only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// All-labels mode only: fraction of items with gold set == predicted set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match_accuracy: Option<f64>,
    pub per_class: BTreeMap<u32, Prf>,
    pub micro: Prf,
    pub macro_avg: Prf,
    /// Class order of the confusion matrix rows/columns (primary mode).
    pub classes: Vec<u32>,
    /// confusion[gold][pred] counts; empty in all-labels mode.
    pub confusion: Vec<Vec<usize>>,
}

fn check_alignment(gold: &[LabelAssignment], pred: &[LabelAssignment]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} gold items vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::invalid("empty classification report"));
    }
    for (g, p) in gold.iter().zip(pred) {
        if g.doc_id != p.doc_id {
            return Err(Error::invalid(format!(
                "misaligned doc ids: gold `{}` vs pred `{}`",
                g.doc_id, p.doc_id
            )));
        }
    }
    Ok(())
}

fn primary_report(gold: &[LabelAssignment], pred: &[LabelAssignment]) -> ClassificationReport {
    let classes: Vec<u32> = gold
        .iter()
        .chain(pred)
        .map(|a| a.primary_index)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let slot: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (g, p) in gold.iter().zip(pred) {
        confusion[slot[&g.primary_index]][slot[&p.primary_index]] += 1;
    }

    let n = gold.len();
    let mut per_class = BTreeMap::new();
    let mut correct = 0usize;
    for (i, &class) in classes.iter().enumerate() {
        let tp = confusion[i][i];
        let row: usize = confusion[i].iter().sum();
        let col: usize = confusion.iter().map(|r| r[i]).sum();
        correct += tp;
        per_class.insert(class, prf_from_counts(tp, col - tp, row - tp, row));
    }

    // Single-label: every miss is one false positive and one false negative.
    let micro = prf_from_counts(correct, n - correct, n - correct, n);
    let macro_avg = Prf {
        precision: per_class.values().map(|p| p.precision).sum::<f64>() / k as f64,
        recall: per_class.values().map(|p| p.recall).sum::<f64>() / k as f64,
        f1: per_class.values().map(|p| p.f1).sum::<f64>() / k as f64,
        support: n,
    };

    ClassificationReport {
        mode: ReportMode::Primary,
        n_items: n,
        accuracy: Some(ratio(correct, n)),
        exact_match_accuracy: None,
        per_class,
        micro,
        macro_avg,
        classes,
        confusion,
    }
}

fn all_labels_report(gold: &[LabelAssignment], pred: &[LabelAssignment]) -> ClassificationReport {
    let classes: Vec<u32> = gold
        .iter()
        .chain(pred)
        .flat_map(|a| a.all_indices.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let n = gold.len();
    let mut exact = 0usize;
    let mut tp_by_class: BTreeMap<u32, usize> = BTreeMap::new();
    let mut fp_by_class: BTreeMap<u32, usize> = BTreeMap::new();
    let mut fn_by_class: BTreeMap<u32, usize> = BTreeMap::new();
    let mut support_by_class: BTreeMap<u32, usize> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        if g.all_indices == p.all_indices {
            exact += 1;
        }
        for &class in &classes {
            let in_gold = g.all_indices.contains(&class);
            let in_pred = p.all_indices.contains(&class);
            if in_gold {
                *support_by_class.entry(class).or_insert(0) += 1;
            }
            match (in_gold, in_pred) {
                (true, true) => *tp_by_class.entry(class).or_insert(0) += 1,
                (false, true) => *fp_by_class.entry(class).or_insert(0) += 1,
                (true, false) => *fn_by_class.entry(class).or_insert(0) += 1,
                (false, false) => {}
            }
        }
    }

    let count = |map: &BTreeMap<u32, usize>, class: u32| map.get(&class).copied().unwrap_or(0);
    let mut per_class = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &class in &classes {
        let (ctp, cfp, cfn) = (
            count(&tp_by_class, class),
            count(&fp_by_class, class),
            count(&fn_by_class, class),
        );
        tp += ctp;
        fp += cfp;
        fn_ += cfn;
        per_class.insert(
            class,
            prf_from_counts(ctp, cfp, cfn, count(&support_by_class, class)),
        );
    }

    let k = classes.len().max(1);
    let macro_avg = Prf {
        precision: per_class.values().map(|p| p.precision).sum::<f64>() / k as f64,
        recall: per_class.values().map(|p| p.recall).sum::<f64>() / k as f64,
        f1: per_class.values().map(|p| p.f1).sum::<f64>() / k as f64,
        support: n,
    };

    ClassificationReport {
        mode: ReportMode::AllLabels,
        n_items: n,
        accuracy: None,
        exact_match_accuracy: Some(ratio(exact, n)),
        per_class,
        micro: prf_from_counts(tp, fp, fn_, n),
        macro_avg,
        classes,
        confusion: Vec::new(),
    }
}

/// Compare predictions against gold assignments. `Primary` mode scores the
/// single primary label (accuracy, per-class and averaged P/R/F1, confusion
/// matrix); `AllLabels` mode scores the label sets (exact match plus P/R/F1
/// over per-label binary indicators).
pub fn classification_report(
    gold: &[LabelAssignment],
    pred: &[LabelAssignment],
    mode: ReportMode,
) -> Result<ClassificationReport> {
    check_alignment(gold, pred)?;
    Ok(match mode {
        ReportMode::Primary => primary_report(gold, pred),
        ReportMode::AllLabels => all_labels_report(gold, pred),
    })
}

/// Render the confusion matrix as CSV with `gold\pred` headers.
pub fn confusion_csv(report: &ClassificationReport) -> String {
    let mut out = String::from("gold\\pred");
    for class in &report.classes {
        out.push_str(&format!(",{class}"));
    }
    out.push('\n');
    for (i, class) in report.classes.iter().enumerate() {
        out.push_str(&class.to_string());
        for value in &report.confusion[i] {
            out.push_str(&format!(",{value}"));
        }
        out.push('\n');
    }
    out
}
