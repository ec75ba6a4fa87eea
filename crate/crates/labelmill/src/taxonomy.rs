//! Label taxonomies and their markdown-table wire format.
//!
//! Taxonomies cross the LLM boundary as three-column markdown tables
//! (`| index | name | description |`), so the codec here must survive
//! adversarial cell content: pipes and backslashes are escaped on encode and
//! unescaped on decode, and cells are single-line by construction (newlines
//! become spaces when a [`Label`] is built). `from_markdown` accepts anything
//! and never panics; it is a fuzz target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the catch-all label appended by [`inject_other`].
pub const OTHER_LABEL: &str = "Other";

const OTHER_DESCRIPTION: &str = "Anything that does not fit any other category in this taxonomy.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    /// 1-based; unique and contiguous within a taxonomy.
    pub index: u32,
    pub name: String,
    pub description: String,
}

impl Label {
    /// Builds a label with single-line cells: CR/LF become spaces and the
    /// result is trimmed, which keeps the markdown codec a true roundtrip.
    pub fn new(index: u32, name: &str, description: &str) -> Label {
        Label {
            index,
            name: normalize_cell(name),
            description: normalize_cell(description),
        }
    }
}

fn normalize_cell(s: &str) -> String {
    s.replace(['\r', '\n'], " ").trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub labels: Vec<Label>,
    pub use_case: String,
    /// 1 = root; children produced by hierarchical expansion sit deeper.
    pub level: u32,
    /// Index of the parent label when `level > 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_label: Option<u32>,
}

impl Taxonomy {
    pub fn new(labels: Vec<Label>, use_case: &str) -> Taxonomy {
        Taxonomy {
            labels,
            use_case: use_case.to_string(),
            level: 1,
            parent_label: None,
        }
    }

    pub fn label_at(&self, index: u32) -> Option<&Label> {
        self.labels.iter().find(|l| l.index == index)
    }

    /// Case-insensitive name lookup.
    pub fn find_by_name(&self, name: &str) -> Option<&Label> {
        let needle = name.trim().to_lowercase();
        self.labels.iter().find(|l| l.name.to_lowercase() == needle)
    }

    /// Index of the catch-all label, when present.
    pub fn other_index(&self) -> Option<u32> {
        self.find_by_name(OTHER_LABEL).map(|l| l.index)
    }
}

/// Constraints a taxonomy is asked to satisfy: the use case it serves, the
/// preferred and maximum label counts, and the name length budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRequirements {
    pub use_case: String,
    pub target_count: usize,
    pub max_count: usize,
    pub max_words_per_name: usize,
}

impl TaxonomyRequirements {
    pub fn validate(&self) -> Result<()> {
        if self.use_case.trim().is_empty() {
            return Err(Error::invalid("use case must be non-empty"));
        }
        if self.target_count == 0 || self.max_count < self.target_count {
            return Err(Error::invalid(
                "label counts must satisfy 1 <= target <= max",
            ));
        }
        if self.max_words_per_name == 0 {
            return Err(Error::invalid("max words per name must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Empty,
    SizeLimitExceeded { count: usize, max: usize },
    NonContiguousIndices,
    DuplicateName { name: String },
    EmptyName { index: u32 },
    EmptyDescription { index: u32 },
    NameTooLong { index: u32, words: usize, max: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Empty => write!(f, "taxonomy has no labels"),
            Violation::SizeLimitExceeded { count, max } => {
                write!(f, "{count} labels exceed the maximum of {max}")
            }
            Violation::NonContiguousIndices => {
                write!(f, "label indices are not contiguous from 1")
            }
            Violation::DuplicateName { name } => write!(f, "duplicate label name `{name}`"),
            Violation::EmptyName { index } => write!(f, "label {index} has an empty name"),
            Violation::EmptyDescription { index } => {
                write!(f, "label {index} has an empty description")
            }
            Violation::NameTooLong { index, words, max } => {
                write!(f, "label {index} name has {words} words (max {max})")
            }
        }
    }
}

/// Check a taxonomy against requirements. An empty vector means valid; the
/// boundary case (exactly `max_count` labels) passes.
pub fn validate(taxonomy: &Taxonomy, req: &TaxonomyRequirements) -> Vec<Violation> {
    let mut violations = Vec::new();
    if taxonomy.labels.is_empty() {
        violations.push(Violation::Empty);
        return violations;
    }
    if taxonomy.labels.len() > req.max_count {
        violations.push(Violation::SizeLimitExceeded {
            count: taxonomy.labels.len(),
            max: req.max_count,
        });
    }
    let mut indices: Vec<u32> = taxonomy.labels.iter().map(|l| l.index).collect();
    indices.sort_unstable();
    if indices != (1..=taxonomy.labels.len() as u32).collect::<Vec<_>>() {
        violations.push(Violation::NonContiguousIndices);
    }
    let mut seen = std::collections::BTreeSet::new();
    for label in &taxonomy.labels {
        if label.name.is_empty() {
            violations.push(Violation::EmptyName { index: label.index });
        } else {
            if !seen.insert(label.name.to_lowercase()) {
                violations.push(Violation::DuplicateName {
                    name: label.name.clone(),
                });
            }
            let words = label.name.split_whitespace().count();
            if words > req.max_words_per_name {
                violations.push(Violation::NameTooLong {
                    index: label.index,
                    words,
                    max: req.max_words_per_name,
                });
            }
        }
        if label.description.is_empty() {
            violations.push(Violation::EmptyDescription { index: label.index });
        }
    }
    violations
}

/// Append the catch-all label with the next index. Idempotent: a taxonomy
/// that already carries a label named `Other` (case-insensitive) is returned
/// unchanged.
pub fn inject_other(taxonomy: &Taxonomy) -> Taxonomy {
    if taxonomy.other_index().is_some() {
        return taxonomy.clone();
    }
    let mut out = taxonomy.clone();
    let next = out.labels.len() as u32 + 1;
    out.labels.push(Label::new(next, OTHER_LABEL, OTHER_DESCRIPTION));
    out
}

fn escape_cell(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '\n' | '\r' => out.push(' '),
            other => out.push(other),
        }
    }
    out
}

pub(crate) fn unescape_cell(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('\\') => out.push('\\'),
                Some('|') => out.push('|'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Encode a taxonomy as the wire-format table: a header row, a separator row,
/// and one row per label. Pipes and backslashes inside cells are escaped.
pub fn to_markdown(taxonomy: &Taxonomy) -> Result<String> {
    if taxonomy.labels.is_empty() {
        return Err(Error::invalid("cannot encode an empty taxonomy"));
    }
    let mut out = String::new();
    out.push_str("| index | name | description |\n");
    out.push_str("| --- | --- | --- |\n");
    for label in &taxonomy.labels {
        out.push_str(&format!(
            "| {} | {} | {} |\n",
            label.index,
            escape_cell(&label.name),
            escape_cell(&label.description)
        ));
    }
    Ok(out)
}

/// Split a table row on unescaped pipes, honoring `\|` and `\\`.
pub(crate) fn split_row(line: &str) -> Vec<String> {
    let mut cells = Vec::new();
    let mut current = String::new();
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                current.push('\\');
                if let Some(next) = chars.next() {
                    current.push(next);
                }
            }
            '|' => {
                cells.push(current.clone());
                current.clear();
            }
            other => current.push(other),
        }
    }
    cells.push(current);
    // Boundary pipes produce empty leading/trailing segments; drop them.
    if cells.first().map(|c| c.trim().is_empty()).unwrap_or(false) {
        cells.remove(0);
    }
    if cells.last().map(|c| c.trim().is_empty()).unwrap_or(false) {
        cells.pop();
    }
    cells
}

fn strip_bold(s: &str) -> &str {
    let t = s.trim();
    t.strip_prefix("**")
        .and_then(|u| u.strip_suffix("**"))
        .unwrap_or(t)
}

pub(crate) fn is_separator_row(cells: &[String]) -> bool {
    !cells.is_empty()
        && cells
            .iter()
            .all(|c| !c.trim().is_empty() && c.trim().chars().all(|ch| ch == '-' || ch == ':'))
}

/// Decode the wire-format table. Tolerates surrounding whitespace, a missing
/// separator row, and bold (`**`) markers; requires the three-column header
/// and integer indices forming exactly `1..=n` (rows are returned sorted by
/// index). Never panics, whatever the input.
pub fn from_markdown(text: &str, use_case: &str) -> Result<Taxonomy> {
    let mut rows = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .peekable();

    let header = rows.next().ok_or_else(|| Error::TaxonomyFormat {
        row: None,
        reason: "empty table".to_string(),
    })?;
    let header_cells = split_row(header);
    let header_names: Vec<String> = header_cells
        .iter()
        .map(|c| strip_bold(c).to_lowercase())
        .collect();
    if header_names != ["index", "name", "description"] {
        return Err(Error::TaxonomyFormat {
            row: None,
            reason: format!("expected header `| index | name | description |`, got `{header}`"),
        });
    }

    if let Some(next) = rows.peek() {
        if is_separator_row(&split_row(next)) {
            rows.next();
        }
    }

    let mut labels = Vec::new();
    for (i, line) in rows.enumerate() {
        let row_no = i + 1;
        let cells = split_row(line);
        if cells.len() != 3 {
            return Err(Error::TaxonomyFormat {
                row: Some(row_no),
                reason: format!("expected 3 columns, got {}", cells.len()),
            });
        }
        let index: u32 = strip_bold(&cells[0]).parse().map_err(|_| Error::TaxonomyFormat {
            row: Some(row_no),
            reason: format!("non-integer index `{}`", cells[0].trim()),
        })?;
        // Bold markers are stripped from headers and indices only; stripping
        // them from name/description cells would break the codec roundtrip.
        let name = unescape_cell(cells[1].trim());
        let description = unescape_cell(cells[2].trim());
        labels.push(Label::new(index, &name, &description));
    }

    if labels.is_empty() {
        return Err(Error::TaxonomyFormat {
            row: None,
            reason: "table has no label rows".to_string(),
        });
    }
    labels.sort_by_key(|l| l.index);
    let expected: Vec<u32> = (1..=labels.len() as u32).collect();
    let got: Vec<u32> = labels.iter().map(|l| l.index).collect();
    if got != expected {
        return Err(Error::TaxonomyFormat {
            row: None,
            reason: format!("indices must be exactly 1..{} (got {:?})", labels.len(), got),
        });
    }

    Ok(Taxonomy::new(labels, use_case))
}
