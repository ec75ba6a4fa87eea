//! Tagged-output extraction and post-response guardrail checks.
//!
//! Every chained prompt asks for its payload inside `<output>` tags; the
//! guardrails then gate the extracted payload: does it parse, is it in the
//! expected language, does it respect the size budget, and do label indices
//! and names agree with the current taxonomy. Any failure triggers a retry at
//! a higher temperature.

use serde::Serialize;

use crate::corpus::LanguageDetector;
use crate::error::{Error, Result};
use crate::gateway::payload;
use crate::taxonomy::{self, Taxonomy};

/// Extract the innermost content of the first `<tag>...</tag>` pair, trimmed.
/// Nested same-tag layers are peeled. Missing or unclosed tags are errors.
pub fn extract_tagged(raw: &str, tag: &str) -> Result<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw
        .find(&open)
        .ok_or_else(|| Error::Payload(format!("missing <{tag}> tag")))?;
    let rest = &raw[start + open.len()..];
    let end = rest
        .rfind(&close)
        .ok_or_else(|| Error::Payload(format!("unclosed <{tag}> tag")))?;
    let mut inner = rest[..end].trim();
    while inner.starts_with(&open) && inner.ends_with(&close) && inner.len() >= open.len() + close.len()
    {
        inner = inner[open.len()..inner.len() - close.len()].trim();
    }
    Ok(inner.to_string())
}

/// What shape the extracted payload must have for the format check.
#[derive(Debug, Clone, PartialEq)]
pub enum PayloadKind {
    /// Any non-empty text (summaries).
    FreeText,
    /// Markdown label table.
    TaxonomyTable,
    /// `primary:`/`all:` assignment lines.
    Assignment,
    /// A single integer in `1..=max`.
    ChoiceIndex { max: usize },
    /// `1`, `2`, or `none`.
    PairChoice,
    /// `relevant` or `not_relevant`.
    RelevanceVerdict,
    /// `name:` + `description:` lines.
    ClusterName,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GuardrailCheck {
    /// The payload parses as the given kind.
    FormatParse { payload: PayloadKind },
    /// The payload is in the expected language per the corpus detector.
    OutputLanguage { expected: String },
    /// A taxonomy payload stays within `max_labels`.
    SizeLimit { max_labels: usize },
    /// Every `(index, name)` pair in an assignment payload matches the
    /// taxonomy row at that index.
    IndexNameConsistency { taxonomy: Taxonomy },
}

impl GuardrailCheck {
    pub fn name(&self) -> &'static str {
        match self {
            GuardrailCheck::FormatParse { .. } => "format_parse",
            GuardrailCheck::OutputLanguage { .. } => "output_language",
            GuardrailCheck::SizeLimit { .. } => "size_limit",
            GuardrailCheck::IndexNameConsistency { .. } => "index_name_consistency",
        }
    }
}

/// Ordered checks applied to every attempt of a chained prompt. Must be
/// non-empty: an unguarded chained prompt is a configuration bug.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardrailSpec {
    pub checks: Vec<GuardrailCheck>,
}

impl GuardrailSpec {
    pub fn new(checks: Vec<GuardrailCheck>) -> Self {
        GuardrailSpec { checks }
    }
}

/// One failed check on one attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GuardrailFailure {
    pub check: String,
    pub detail: String,
}

fn check_format(payload: &PayloadKind, extracted: &str) -> Result<()> {
    match payload {
        PayloadKind::FreeText => {
            if extracted.trim().is_empty() {
                Err(Error::Payload("empty payload".to_string()))
            } else {
                Ok(())
            }
        }
        PayloadKind::TaxonomyTable => taxonomy::from_markdown(extracted, "check").map(|_| ()),
        PayloadKind::Assignment => payload::parse_assignment(extracted).map(|_| ()),
        PayloadKind::ChoiceIndex { max } => payload::parse_choice(extracted, *max).map(|_| ()),
        PayloadKind::PairChoice => payload::parse_pair_choice(extracted).map(|_| ()),
        PayloadKind::RelevanceVerdict => payload::parse_relevance(extracted).map(|_| ()),
        PayloadKind::ClusterName => payload::parse_cluster_name(extracted).map(|_| ()),
    }
}

/// Run every check in order against an extracted payload; returns all
/// failures (empty means the attempt passes).
pub fn run_guardrails(
    extracted: &str,
    spec: &GuardrailSpec,
    detector: &dyn LanguageDetector,
) -> Vec<GuardrailFailure> {
    let mut failures = Vec::new();
    for check in &spec.checks {
        let outcome: Result<()> = match check {
            GuardrailCheck::FormatParse { payload } => check_format(payload, extracted),
            GuardrailCheck::OutputLanguage { expected } => {
                let got = detector.detect(extracted);
                if &got == expected {
                    Ok(())
                } else {
                    Err(Error::Payload(format!(
                        "expected language `{expected}`, detected `{got}`"
                    )))
                }
            }
            GuardrailCheck::SizeLimit { max_labels } => {
                match taxonomy::from_markdown(extracted, "check") {
                    Ok(t) if t.labels.len() <= *max_labels => Ok(()),
                    Ok(t) => Err(Error::Payload(format!(
                        "{} labels exceed the limit of {max_labels}",
                        t.labels.len()
                    ))),
                    Err(e) => Err(e),
                }
            }
            GuardrailCheck::IndexNameConsistency { taxonomy } => {
                check_index_name_consistency(extracted, taxonomy)
            }
        };
        if let Err(e) = outcome {
            failures.push(GuardrailFailure {
                check: check.name().to_string(),
                detail: e.to_string(),
            });
        }
    }
    failures
}

fn check_index_name_consistency(extracted: &str, taxonomy: &Taxonomy) -> Result<()> {
    let reply = payload::parse_assignment(extracted)?;
    let mut pairs = vec![reply.primary.clone()];
    pairs.extend(reply.all.iter().cloned());
    for (index, name) in pairs {
        match taxonomy.label_at(index) {
            Some(label) if label.name.to_lowercase() == name.trim().to_lowercase() => {}
            Some(label) => {
                return Err(Error::Payload(format!(
                    "label {index} is named `{}`, reply said `{name}`",
                    label.name
                )))
            }
            None => {
                return Err(Error::Payload(format!(
                    "label index {index} is not in the taxonomy"
                )))
            }
        }
    }
    Ok(())
}
