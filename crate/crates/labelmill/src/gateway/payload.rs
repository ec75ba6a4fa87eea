//! Parsers for the structured reply payloads the pipeline expects back from a
//! chat backend. All of them take untrusted text and must never panic.

use crate::error::{Error, Result};

/// A parsed label-assignment reply: the primary label plus every applicable
/// label, each as `(index, name)` exactly as prompted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentReply {
    pub primary: (u32, String),
    pub all: Vec<(u32, String)>,
}

/// ASCII-case-insensitive prefix strip. `prefix` must be ASCII; the matched
/// region is then ASCII too, so the slice is always on a char boundary.
fn strip_prefix_ci<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
    if line.len() >= prefix.len()
        && line.as_bytes()[..prefix.len()].eq_ignore_ascii_case(prefix.as_bytes())
    {
        Some(&line[prefix.len()..])
    } else {
        None
    }
}

fn parse_pair(text: &str) -> Result<(u32, String)> {
    let t = text.trim();
    let inner = t
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Payload(format!("expected `(index, name)`, got `{t}`")))?;
    let (idx, name) = inner
        .split_once(',')
        .ok_or_else(|| Error::Payload(format!("expected `(index, name)`, got `{t}`")))?;
    let index: u32 = idx
        .trim()
        .parse()
        .map_err(|_| Error::Payload(format!("non-integer label index `{}`", idx.trim())))?;
    let name = name.trim();
    if name.is_empty() {
        return Err(Error::Payload("empty label name".to_string()));
    }
    Ok((index, name.to_string()))
}

/// Parse an assignment reply:
///
/// ```text
/// primary: (3, Example Label)
/// all: (3, Example Label); (5, Another Label)
/// ```
///
/// The `all` line is optional (primary-only mode); a bare `(index, name)`
/// line is accepted as the primary.
pub fn parse_assignment(text: &str) -> Result<AssignmentReply> {
    let mut primary = None;
    let mut all = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = strip_prefix_ci(line, "primary:") {
            if primary.is_some() {
                return Err(Error::Payload("more than one primary line".to_string()));
            }
            primary = Some(parse_pair(rest)?);
        } else if let Some(rest) = strip_prefix_ci(line, "all:") {
            for piece in rest.split(';') {
                if piece.trim().is_empty() {
                    continue;
                }
                all.push(parse_pair(piece)?);
            }
        } else if primary.is_none() && line.starts_with('(') {
            primary = Some(parse_pair(line)?);
        } else {
            return Err(Error::Payload(format!("unrecognized line `{line}`")));
        }
    }
    let primary = primary.ok_or_else(|| Error::Payload("missing primary label".to_string()))?;
    if all.is_empty() {
        all.push(primary.clone());
    }
    Ok(AssignmentReply { primary, all })
}

/// Parse a candidate-selection reply: a single integer in `1..=max`.
pub fn parse_choice(text: &str, max: usize) -> Result<usize> {
    let t = text.trim().trim_end_matches('.');
    let value: usize = t
        .parse()
        .map_err(|_| Error::Payload(format!("expected an integer choice, got `{t}`")))?;
    if value < 1 || value > max {
        return Err(Error::Payload(format!(
            "choice {value} out of range 1..={max}"
        )));
    }
    Ok(value)
}

/// Which option a pairwise rater picked; `Neither` is the explicit `none`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairChoice {
    First,
    Second,
    Neither,
}

/// Parse a pairwise reply: `1`, `2`, or `none`.
pub fn parse_pair_choice(text: &str) -> Result<PairChoice> {
    match text.trim().to_lowercase().as_str() {
        "1" => Ok(PairChoice::First),
        "2" => Ok(PairChoice::Second),
        "none" => Ok(PairChoice::Neither),
        other => Err(Error::Payload(format!(
            "expected `1`, `2`, or `none`, got `{other}`"
        ))),
    }
}

/// Parse a relevance verdict: `relevant` or `not_relevant`.
pub fn parse_relevance(text: &str) -> Result<bool> {
    match text.trim().to_lowercase().replace(' ', "_").as_str() {
        "relevant" => Ok(true),
        "not_relevant" => Ok(false),
        other => Err(Error::Payload(format!(
            "expected `relevant` or `not_relevant`, got `{other}`"
        ))),
    }
}

/// Parse a cluster-naming reply:
///
/// ```text
/// name: Example Label
/// description: One or two sentences.
/// ```
pub fn parse_cluster_name(text: &str) -> Result<(String, String)> {
    let mut name = None;
    let mut description = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = strip_prefix_ci(line, "name:") {
            if name.is_some() {
                return Err(Error::Payload("more than one name line".to_string()));
            }
            name = Some(rest.trim().to_string());
        } else if let Some(rest) = strip_prefix_ci(line, "description:") {
            if description.is_some() {
                return Err(Error::Payload("more than one description line".to_string()));
            }
            description = Some(rest.trim().to_string());
        } else {
            return Err(Error::Payload(format!("unrecognized line `{line}`")));
        }
    }
    match (name, description) {
        (Some(n), Some(d)) if !n.is_empty() && !d.is_empty() => Ok((n, d)),
        _ => Err(Error::Payload(
            "expected non-empty `name:` and `description:` lines".to_string(),
        )),
    }
}
