//! Chance-corrected inter-rater agreement: Cohen's kappa for two raters,
//! Fleiss' kappa for many.
//!
//! Degenerate inputs where expected agreement is 1 cannot be chance-corrected;
//! they surface as [`Kappa::Undefined`] rather than a silent division by
//! zero. The degeneracy tests run on integer counts, so they are exact.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// A kappa statistic, or the explicit signal that the formula's denominator
/// vanished.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kappa {
    Defined(f64),
    Undefined,
}

impl Kappa {
    pub fn value(&self) -> Option<f64> {
        match self {
            Kappa::Defined(v) => Some(*v),
            Kappa::Undefined => None,
        }
    }
}

impl std::fmt::Display for Kappa {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Kappa::Defined(v) => write!(f, "{v}"),
            Kappa::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Kappa {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Kappa::Defined(v) => serializer.serialize_f64(*v),
            Kappa::Undefined => serializer.serialize_str("undefined"),
        }
    }
}

/// Cohen's kappa between two aligned label sequences:
/// κ = (p_o − p_e) / (1 − p_e) over the joint label set.
///
/// When p_e = 1 the raters are both constant; if they also agree perfectly
/// the statistic is 1 by convention, otherwise (unreachable in exact
/// arithmetic, kept as defense) the undefined signal is returned.
pub fn cohen_kappa(a: &[u32], b: &[u32]) -> Result<Kappa> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "rater sequences have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("kappa of empty sequences"));
    }
    let n = a.len() as u128;

    let mut categories: Vec<u32> = a.iter().chain(b).copied().collect();
    categories.sort_unstable();
    categories.dedup();

    let count_in = |xs: &[u32], c: u32| xs.iter().filter(|&&x| x == c).count() as u128;
    let agreements = a.iter().zip(b).filter(|(x, y)| x == y).count() as u128;
    // Integer cross-marginal sum: p_e = cross / n², exact degeneracy test.
    let cross: u128 = categories
        .iter()
        .map(|&c| count_in(a, c) * count_in(b, c))
        .sum();

    if cross == n * n {
        return Ok(if agreements == n {
            Kappa::Defined(1.0)
        } else {
            Kappa::Undefined
        });
    }
    let p_o = agreements as f64 / n as f64;
    let p_e = cross as f64 / (n * n) as f64;
    Ok(Kappa::Defined((p_o - p_e) / (1.0 - p_e)))
}

/// Fleiss' kappa from an item × category count matrix:
/// κ = (P̄ − P̄_e) / (1 − P̄_e), with per-item agreement
/// P_i = [Σ_j n_ij(n_ij − 1)] / [n(n − 1)] for n raters.
///
/// A single category used throughout makes P̄_e = 1; that is reported as the
/// undefined signal.
pub fn fleiss_kappa(ratings: &[Vec<usize>], n_raters: usize) -> Result<Kappa> {
    if n_raters < 2 {
        return Err(Error::invalid(format!(
            "fleiss kappa needs at least 2 raters, got {n_raters}"
        )));
    }
    if ratings.is_empty() {
        return Err(Error::invalid("fleiss kappa of zero items"));
    }
    let n_categories = ratings[0].len();
    if n_categories == 0 {
        return Err(Error::invalid("fleiss kappa with zero categories"));
    }
    for (i, row) in ratings.iter().enumerate() {
        if row.len() != n_categories {
            return Err(Error::invalid(format!(
                "item {i} has {} categories, expected {n_categories}",
                row.len()
            )));
        }
        let total: usize = row.iter().sum();
        if total != n_raters {
            return Err(Error::invalid(format!(
                "item {i} has {total} ratings, expected {n_raters}"
            )));
        }
    }

    let n_items = ratings.len();
    // Exact degeneracy test on integer column totals.
    let column_totals: Vec<usize> = (0..n_categories)
        .map(|j| ratings.iter().map(|row| row[j]).sum())
        .collect();
    if column_totals.iter().any(|&t| t == n_items * n_raters) {
        return Ok(Kappa::Undefined);
    }

    let pair_denominator = (n_raters * (n_raters - 1)) as f64;
    let p_bar = ratings
        .iter()
        .map(|row| {
            row.iter().map(|&c| (c * c.saturating_sub(1)) as f64).sum::<f64>() / pair_denominator
        })
        .sum::<f64>()
        / n_items as f64;
    let p_e_bar = column_totals
        .iter()
        .map(|&t| {
            let p = t as f64 / (n_items * n_raters) as f64;
            p * p
        })
        .sum::<f64>();
    Ok(Kappa::Defined((p_bar - p_e_bar) / (1.0 - p_e_bar)))
}
