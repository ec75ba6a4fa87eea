//! Corpus ingestion, filtering, language tagging, sampling, and splitting.
//!
//! Documents enter from jsonl files (one object per line) or from a directory
//! of plain-text files. Every downstream stage works on a [`CorpusSample`],
//! which keeps document order stable and records the train/validation/test
//! assignment once [`split_corpus`] has run.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    /// ISO-8601 instant, kept verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Document {
    pub fn new(id: &str, text: &str) -> Self {
        Document {
            id: id.to_string(),
            text: text.to_string(),
            language: None,
            timestamp: None,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub documents: Vec<Document>,
    /// Document id -> split; empty until [`split_corpus`] has run.
    #[serde(default)]
    pub split_assignment: BTreeMap<String, Split>,
    /// Seed of the last seeded operation applied to this sample.
    #[serde(default)]
    pub seed: u64,
}

impl CorpusSample {
    pub fn new(documents: Vec<Document>) -> Self {
        CorpusSample {
            documents,
            split_assignment: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Documents carrying the given split tag, in corpus order.
    pub fn in_split(&self, split: Split) -> Vec<&Document> {
        self.documents
            .iter()
            .filter(|d| self.split_assignment.get(&d.id) == Some(&split))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub retained: usize,
    /// Drop counts keyed by the rule string; a document counts against the
    /// first rule that rejected it.
    pub dropped_by_rule: BTreeMap<String, usize>,
}

/// Pluggable language identification used for document tagging and for the
/// output-language guardrail.
pub trait LanguageDetector: Send + Sync {
    /// Returns a BCP-47-ish tag; `"und"` when undetermined.
    fn detect(&self, text: &str) -> String;
}

/// Default detector: tags `"en"` when at least 80% of characters are ASCII
/// letters, digits, punctuation, or whitespace, `"und"` otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct AsciiHeuristic;

impl LanguageDetector for AsciiHeuristic {
    fn detect(&self, text: &str) -> String {
        let mut total = 0usize;
        let mut hits = 0usize;
        for c in text.chars() {
            total += 1;
            if c.is_ascii_alphanumeric() || c.is_ascii_punctuation() || c.is_ascii_whitespace() {
                hits += 1;
            }
        }
        if total > 0 && hits as f64 / total as f64 >= 0.8 {
            "en".to_string()
        } else {
            "und".to_string()
        }
    }
}

/// Ingest a jsonl corpus: one JSON object per line, `id` and `text` required
/// and non-empty, `language`/`timestamp` optional. Unknown fields are
/// preserved in `metadata` (non-string values as compact JSON). Blank lines
/// are skipped. Document order follows line order.
pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<CorpusSample> {
    let file = std::fs::File::open(path.as_ref()).map_err(|source| Error::IoPath {
        path: path.as_ref().to_path_buf(),
        source,
    })?;
    ingest_jsonl_reader(std::io::BufReader::new(file))
}

/// Reader-based jsonl ingestion; see [`ingest_jsonl`].
pub fn ingest_jsonl_reader<R: BufRead>(reader: R) -> Result<CorpusSample> {
    let mut documents = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = parse_document_line(&line, lineno)?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateDocId { id: doc.id });
        }
        documents.push(doc);
    }
    Ok(CorpusSample::new(documents))
}

fn parse_document_line(line: &str, lineno: usize) -> Result<Document> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Record {
        line: lineno,
        reason: format!("invalid json: {e}"),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Record {
        line: lineno,
        reason: "expected a json object".to_string(),
    })?;

    let field = |name: &str| -> Result<String> {
        match obj.get(name) {
            Some(serde_json::Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(serde_json::Value::String(_)) => Err(Error::Record {
                line: lineno,
                reason: format!("field `{name}` is empty"),
            }),
            Some(_) => Err(Error::Record {
                line: lineno,
                reason: format!("field `{name}` must be a string"),
            }),
            None => Err(Error::Record {
                line: lineno,
                reason: format!("missing field `{name}`"),
            }),
        }
    };
    let id = field("id")?;
    let text = field("text")?;

    let opt_str = |name: &str| -> Option<String> {
        obj.get(name).and_then(|v| v.as_str()).map(str::to_string)
    };
    let language = opt_str("language");
    let timestamp = opt_str("timestamp");

    let mut metadata = BTreeMap::new();
    for (key, val) in obj {
        match key.as_str() {
            "id" | "text" | "language" | "timestamp" => {}
            "metadata" => {
                if let Some(map) = val.as_object() {
                    for (k, v) in map {
                        metadata.insert(k.clone(), json_to_flat_string(v));
                    }
                }
            }
            other => {
                metadata.insert(other.to_string(), json_to_flat_string(val));
            }
        }
    }

    Ok(Document {
        id,
        text,
        language,
        timestamp,
        metadata,
    })
}

fn json_to_flat_string(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Ingest a directory of plain-text files (`*.txt`), one document per file,
/// file stem as id. Files are visited in lexicographic order for determinism.
pub fn ingest_dir(path: impl AsRef<Path>) -> Result<CorpusSample> {
    let path = path.as_ref();
    let mut entries: Vec<_> = std::fs::read_dir(path)
        .map_err(|source| Error::IoPath {
            path: path.to_path_buf(),
            source,
        })?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
        .collect();
    entries.sort();

    let mut documents = Vec::new();
    let mut seen = BTreeSet::new();
    for file in entries {
        let id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if id.is_empty() {
            continue;
        }
        let text = std::fs::read_to_string(&file).map_err(|source| Error::IoPath {
            path: file.clone(),
            source,
        })?;
        if text.is_empty() {
            return Err(Error::Record {
                line: 0,
                reason: format!("file `{}` is empty", file.display()),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateDocId { id });
        }
        documents.push(Document {
            id,
            text,
            language: None,
            timestamp: None,
            metadata: BTreeMap::new(),
        });
    }
    Ok(CorpusSample::new(documents))
}

enum FilterRule {
    MinLength(usize),
    MaxLength(usize),
    RegexBlock(regex::Regex),
}

impl FilterRule {
    /// `true` when the document survives the rule.
    fn keeps(&self, doc: &Document) -> bool {
        match self {
            FilterRule::MinLength(n) => doc.text.chars().count() >= *n,
            FilterRule::MaxLength(n) => doc.text.chars().count() <= *n,
            FilterRule::RegexBlock(re) => !re.is_match(&doc.text),
        }
    }
}

fn parse_filter_rule(spec: &str) -> Result<FilterRule> {
    let (name, arg) = spec
        .split_once('=')
        .ok_or_else(|| Error::UnknownFilterRule { rule: spec.to_string() })?;
    let bad = |reason: &str| Error::InvalidFilterRule {
        rule: spec.to_string(),
        reason: reason.to_string(),
    };
    match name.trim() {
        "min-length" => arg
            .trim()
            .parse::<usize>()
            .map(FilterRule::MinLength)
            .map_err(|_| bad("expected an integer character count")),
        "max-length" => arg
            .trim()
            .parse::<usize>()
            .map(FilterRule::MaxLength)
            .map_err(|_| bad("expected an integer character count")),
        "regex-block" => regex::Regex::new(arg)
            .map(FilterRule::RegexBlock)
            .map_err(|e| bad(&format!("bad pattern: {e}"))),
        _ => Err(Error::UnknownFilterRule { rule: spec.to_string() }),
    }
}

/// Apply an ordered list of filter rules. Built-in rules: `min-length=N`,
/// `max-length=N` (character counts) and `regex-block=PATTERN`. A document is
/// dropped by the first rule that rejects it. Applying the same rules to the
/// output is a no-op.
pub fn apply_filters(sample: &CorpusSample, rules: &[String]) -> Result<(CorpusSample, FilterReport)> {
    let parsed: Vec<(String, FilterRule)> = rules
        .iter()
        .map(|spec| parse_filter_rule(spec).map(|r| (spec.clone(), r)))
        .collect::<Result<_>>()?;

    let mut dropped_by_rule: BTreeMap<String, usize> = BTreeMap::new();
    let mut retained = Vec::new();
    'docs: for doc in &sample.documents {
        for (spec, rule) in &parsed {
            if !rule.keeps(doc) {
                *dropped_by_rule.entry(spec.clone()).or_insert(0) += 1;
                continue 'docs;
            }
        }
        retained.push(doc.clone());
    }

    let report = FilterReport {
        input: sample.documents.len(),
        retained: retained.len(),
        dropped_by_rule,
    };
    let split_assignment = sample
        .split_assignment
        .iter()
        .filter(|(id, _)| retained.iter().any(|d| &d.id == *id))
        .map(|(id, s)| (id.clone(), *s))
        .collect();
    Ok((
        CorpusSample {
            documents: retained,
            split_assignment,
            seed: sample.seed,
        },
        report,
    ))
}

/// Fill in missing language tags using the given detector; existing tags are
/// left untouched.
pub fn tag_languages(sample: &mut CorpusSample, detector: &dyn LanguageDetector) {
    for doc in &mut sample.documents {
        if doc.language.is_none() {
            doc.language = Some(detector.detect(&doc.text));
        }
    }
}

/// Assign every document to exactly one of train/validation/test.
///
/// Counts follow the largest-remainder method on `fractions`
/// (train, validation, test); remainder ties break in split order. Membership
/// is a seeded shuffle, so the same seed reproduces the assignment exactly.
pub fn split_corpus(sample: &CorpusSample, fractions: (f64, f64, f64), seed: u64) -> Result<CorpusSample> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| *f < 0.0 || !f.is_finite()) {
        return Err(Error::invalid("split fractions must be non-negative"));
    }
    let total: f64 = fr.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must sum to 1.0 (got {total})"
        )));
    }

    let n = sample.documents.len();
    let mut counts: Vec<usize> = fr.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let mut remainders: Vec<(usize, f64)> = fr
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f * n as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let deficit = n - counts.iter().sum::<usize>();
    for (slot, _) in remainders.iter().take(deficit) {
        counts[*slot] += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut split_assignment = BTreeMap::new();
    for (pos, doc_idx) in order.iter().enumerate() {
        let split = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Validation
        } else {
            Split::Test
        };
        split_assignment.insert(sample.documents[*doc_idx].id.clone(), split);
    }

    Ok(CorpusSample {
        documents: sample.documents.clone(),
        split_assignment,
        seed,
    })
}

/// Draw `n` documents uniformly without replacement. The result is in shuffled
/// order; `n == len` yields a permutation of the full sample. Existing split
/// tags for the kept documents are preserved.
pub fn sample_subset(sample: &CorpusSample, n: usize, seed: u64) -> Result<CorpusSample> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    if n > sample.documents.len() {
        return Err(Error::invalid(format!(
            "sample size {n} exceeds corpus size {}",
            sample.documents.len()
        )));
    }
    let mut order: Vec<usize> = (0..sample.documents.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let documents: Vec<Document> = order
        .into_iter()
        .take(n)
        .map(|i| sample.documents[i].clone())
        .collect();
    let split_assignment = sample
        .split_assignment
        .iter()
        .filter(|(id, _)| documents.iter().any(|d| &d.id == *id))
        .map(|(id, s)| (id.clone(), *s))
        .collect();
    Ok(CorpusSample {
        documents,
        split_assignment,
        seed,
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Every document lands in exactly one split, for any corpus size.
        #[test]
        fn split_is_a_partition(n in 1usize..60, seed in 0u64..1000) {
            let sample = CorpusSample::new(
                (0..n).map(|i| Document {
                    id: format!("d{i}"),
                    text: format!("body {i}"),
                    language: None,
                    timestamp: None,
                    metadata: Default::default(),
                }).collect(),
            );
            let split = split_corpus(&sample, (0.6, 0.2, 0.2), seed).unwrap();
            prop_assert_eq!(split.split_assignment.len(), n);
            for d in &split.documents {
                prop_assert!(split.split_assignment.contains_key(&d.id));
            }
            let counts: usize = [Split::Train, Split::Validation, Split::Test]
                .iter()
                .map(|s| split.in_split(*s).len())
                .sum();
            prop_assert_eq!(counts, n);
        }

        /// Filtering is idempotent for the built-in predicate rules.
        #[test]
        fn filters_are_idempotent(lens in proptest::collection::vec(0usize..30, 1..40), min in 0usize..20) {
            let sample = CorpusSample::new(
                lens.iter().enumerate().map(|(i, l)| Document {
                    id: format!("d{i}"),
                    text: "x".repeat(*l + 1),
                    language: None,
                    timestamp: None,
                    metadata: Default::default(),
                }).collect(),
            );
            let rules = vec![format!("min-length={min}")];
            let (once, _) = apply_filters(&sample, &rules).unwrap();
            let (twice, report) = apply_filters(&once, &rules).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(report.retained, report.input);
        }
    }
}
