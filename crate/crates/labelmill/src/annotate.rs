//! LLM annotation against a finalized taxonomy: primary-label (multiclass)
//! and all-applicable-label (multilabel) pseudo-annotations.
//!
//! Every document is labeled through the guarded assign prompt; replies must
//! name each label together with its index, and the pair is cross-checked
//! against the taxonomy. A document that exhausts its retries falls back to
//! Other with a flag rather than being dropped, so coverage stays honest —
//! but a run where most documents exhaust is an error, not a dataset.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSample, Split};
use crate::error::{Error, Result};
use crate::gateway::{
    ChatJob, Gateway, GenerationSettings, GuardrailCheck, GuardrailSpec, PayloadKind,
    PromptLibrary, TemplateName,
};
use crate::taxonomy::{self, inject_other, Taxonomy, OTHER_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentSource {
    Llm,
    Human,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationMode {
    PrimaryOnly,
    PrimaryAndAll,
}

/// One rater's labels for one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub doc_id: String,
    pub primary_index: u32,
    pub primary_name: String,
    pub all_indices: BTreeSet<u32>,
    pub source: AssignmentSource,
    pub rater_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl LabelAssignment {
    /// Construct with the structural invariant applied: the primary is
    /// always part of `all_indices`.
    pub fn new(
        doc_id: &str,
        primary_index: u32,
        primary_name: &str,
        all_indices: BTreeSet<u32>,
        source: AssignmentSource,
        rater_id: &str,
    ) -> Self {
        let mut all_indices = all_indices;
        all_indices.insert(primary_index);
        LabelAssignment {
            doc_id: doc_id.to_string(),
            primary_index,
            primary_name: primary_name.to_string(),
            all_indices,
            source,
            rater_id: rater_id.to_string(),
            flags: Vec::new(),
        }
    }

    pub fn with_flag(mut self, flag: &str) -> Self {
        self.flags.push(flag.to_string());
        self
    }

    /// Check every index exists in `taxonomy` and the primary name matches.
    pub fn validate_against(&self, taxonomy: &Taxonomy) -> Result<()> {
        for &index in &self.all_indices {
            if taxonomy.label_at(index).is_none() {
                return Err(Error::invalid(format!(
                    "{}: label index {index} not in taxonomy",
                    self.doc_id
                )));
            }
        }
        let label = taxonomy
            .label_at(self.primary_index)
            .expect("primary is in all_indices, just checked");
        if !label.name.eq_ignore_ascii_case(&self.primary_name) {
            return Err(Error::invalid(format!(
                "{}: primary name `{}` does not match taxonomy `{}`",
                self.doc_id, self.primary_name, label.name
            )));
        }
        Ok(())
    }
}

/// An annotated corpus: the taxonomy used, one assignment per (doc, rater),
/// and the split tags inherited from the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledDataset {
    pub taxonomy: Taxonomy,
    pub assignments: Vec<LabelAssignment>,
    pub split_assignment: BTreeMap<String, Split>,
}

impl PseudoLabeledDataset {
    pub fn assignments_in_split(&self, split: Split) -> Vec<&LabelAssignment> {
        self.assignments
            .iter()
            .filter(|a| self.split_assignment.get(&a.doc_id) == Some(&split))
            .collect()
    }
}

/// Fraction of assignments whose primary is anything but Other.
pub fn coverage(ds: &PseudoLabeledDataset) -> Result<f64> {
    if ds.assignments.is_empty() {
        return Err(Error::invalid("coverage of an empty dataset"));
    }
    let other = ds.taxonomy.find_by_name(OTHER_LABEL).map(|l| l.index);
    let n_other = ds
        .assignments
        .iter()
        .filter(|a| Some(a.primary_index) == other)
        .count();
    Ok(1.0 - n_other as f64 / ds.assignments.len() as f64)
}

/// Resolve one document's assignments from ≥3 raters into a single gold
/// assignment: strict majority on the primary, the tiebreaker's vote when
/// there is none, and an `unresolved` flag when there is neither. Applicable
/// labels are kept iff at least ⌈r/2⌉ raters selected them.
pub fn resolve_majority(
    per_doc: &[LabelAssignment],
    tiebreak: Option<&LabelAssignment>,
) -> Result<LabelAssignment> {
    if per_doc.len() < 3 {
        return Err(Error::invalid(format!(
            "majority resolution needs at least 3 raters, got {}",
            per_doc.len()
        )));
    }
    let doc_id = &per_doc[0].doc_id;
    if per_doc.iter().any(|a| &a.doc_id != doc_id) {
        return Err(Error::invalid("majority resolution mixes documents"));
    }
    if let Some(t) = tiebreak {
        if &t.doc_id != doc_id {
            return Err(Error::invalid("tiebreak rater labeled a different document"));
        }
    }

    let r = per_doc.len();
    let mut primary_votes: BTreeMap<u32, usize> = BTreeMap::new();
    for a in per_doc {
        *primary_votes.entry(a.primary_index).or_insert(0) += 1;
    }
    let top = primary_votes
        .iter()
        .map(|(&index, &count)| (count, std::cmp::Reverse(index)))
        .max()
        .expect("at least three votes");
    let (top_count, std::cmp::Reverse(top_index)) = top;

    let (primary_index, unresolved) = if top_count * 2 > r {
        (top_index, false)
    } else if let Some(t) = tiebreak {
        (t.primary_index, false)
    } else {
        // No strict majority, no tiebreaker: keep the lowest-index leader
        // deterministically, but flag the document as unresolved.
        (top_index, true)
    };

    let mut label_votes: BTreeMap<u32, usize> = BTreeMap::new();
    for a in per_doc {
        for &index in &a.all_indices {
            *label_votes.entry(index).or_insert(0) += 1;
        }
    }
    let quorum = r.div_ceil(2);
    let mut all_indices: BTreeSet<u32> = label_votes
        .into_iter()
        .filter(|&(_, votes)| votes >= quorum)
        .map(|(index, _)| index)
        .collect();
    all_indices.insert(primary_index);

    let primary_name = per_doc
        .iter()
        .chain(tiebreak)
        .find(|a| a.primary_index == primary_index)
        .map(|a| a.primary_name.clone())
        .expect("the winning primary was voted for by someone");

    let mut resolved = LabelAssignment::new(
        doc_id,
        primary_index,
        &primary_name,
        all_indices,
        per_doc[0].source,
        "resolved",
    );
    if unresolved {
        resolved = resolved.with_flag("unresolved");
    }
    Ok(resolved)
}

/// Labels above this count split the prompt's table across two turns.
const SINGLE_TURN_LABEL_LIMIT: usize = 40;
const EXHAUSTED_FLAG: &str = "retry-exhausted";

/// Drives the assign prompt over a corpus sample.
pub struct Annotator<'a> {
    gateway: &'a Gateway,
    prompts: &'a PromptLibrary,
    pub settings: GenerationSettings,
    pub max_in_flight: usize,
    pub rater_id: String,
}

impl<'a> Annotator<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptLibrary) -> Self {
        Annotator {
            gateway,
            prompts,
            settings: GenerationSettings::default(),
            max_in_flight: 4,
            rater_id: "llm-annotator".to_string(),
        }
    }

    fn mode_instruction(mode: AnnotationMode) -> &'static str {
        match mode {
            AnnotationMode::PrimaryOnly => {
                "Report only the single most accurate label. The all: line must repeat \
                 exactly that one label."
            }
            AnnotationMode::PrimaryAndAll => {
                "Report the single most accurate label as primary, then every label that \
                 applies to the document (the primary included) on the all: line."
            }
        }
    }

    fn build_job(&self, tax: &Taxonomy, table_turns: &[String], text: &str, mode: AnnotationMode) -> Result<ChatJob> {
        let template = self.prompts.get(TemplateName::Assign);
        let rendered = template.render(&crate::gateway::slots(&[
            ("use_case", &tax.use_case),
            ("taxonomy", table_turns.last().expect("at least one table turn")),
            ("document", text),
            ("mode_instruction", Self::mode_instruction(mode)),
        ]))?;
        let mut turns: Vec<String> = table_turns[..table_turns.len() - 1].to_vec();
        turns.push(rendered);
        Ok(ChatJob::new(
            TemplateName::Assign,
            turns,
            self.settings.clone(),
            GuardrailSpec::new(vec![
                GuardrailCheck::FormatParse {
                    payload: PayloadKind::Assignment,
                },
                GuardrailCheck::IndexNameConsistency {
                    taxonomy: tax.clone(),
                },
            ]),
        ))
    }

    /// The taxonomy table as prompt-turn content: one entry for tables that
    /// fit a single turn, two (leading part + template part) otherwise.
    fn table_turns(tax: &Taxonomy) -> Result<Vec<String>> {
        if tax.labels.len() <= SINGLE_TURN_LABEL_LIMIT {
            return Ok(vec![taxonomy::to_markdown(tax)?]);
        }
        let mid = tax.labels.len() / 2;
        let first = Taxonomy::new(tax.labels[..mid].to_vec(), &tax.use_case);
        let second = Taxonomy::new(tax.labels[mid..].to_vec(), &tax.use_case);
        let preamble = format!(
            "The label table is long, so it is split in two. This is part one; part two \
             and the instructions follow in the next message.\n\n<taxonomy_part_one>\n{}\
             </taxonomy_part_one>",
            taxonomy::to_markdown(&first)?
        );
        Ok(vec![preamble, taxonomy::to_markdown(&second)?])
    }

    /// Label every document in `sample` against `tax` (Other injected here).
    /// Documents that exhaust retries get Other plus a flag; the run fails
    /// only when more than half the documents exhaust.
    pub fn annotate(
        &self,
        sample: &CorpusSample,
        tax: &Taxonomy,
        mode: AnnotationMode,
    ) -> Result<PseudoLabeledDataset> {
        if sample.documents.is_empty() {
            return Err(Error::invalid("nothing to annotate"));
        }
        let tax = inject_other(tax);
        let other_index = tax
            .find_by_name(OTHER_LABEL)
            .map(|l| l.index)
            .expect("inject_other guarantees an Other label");
        let table_turns = Self::table_turns(&tax)?;

        let jobs: Vec<ChatJob> = sample
            .documents
            .iter()
            .map(|doc| self.build_job(&tax, &table_turns, &doc.text, mode))
            .collect::<Result<_>>()?;

        let mut assignments = Vec::with_capacity(jobs.len());
        let mut exhausted = 0usize;
        for (doc, outcome) in sample
            .documents
            .iter()
            .zip(self.gateway.complete_batch(&jobs, self.max_in_flight)?)
        {
            match outcome {
                Ok(exchange) => {
                    let payload = exchange.extracted.as_deref().expect("successful exchange");
                    let reply = crate::gateway::parse_assignment(payload)?;
                    let (primary_index, _) = reply.primary;
                    let primary_name = tax
                        .label_at(primary_index)
                        .expect("index_name_consistency guardrail passed")
                        .name
                        .clone();
                    let all_indices: BTreeSet<u32> = match mode {
                        AnnotationMode::PrimaryOnly => BTreeSet::from([primary_index]),
                        AnnotationMode::PrimaryAndAll => {
                            reply.all.iter().map(|(i, _)| *i).collect()
                        }
                    };
                    assignments.push(LabelAssignment::new(
                        &doc.id,
                        primary_index,
                        &primary_name,
                        all_indices,
                        AssignmentSource::Llm,
                        &self.rater_id,
                    ));
                }
                Err(Error::Exhausted { exchange }) => {
                    log::warn!(
                        "{}: assignment exhausted after {} attempts, falling back to Other",
                        doc.id,
                        exchange.attempts
                    );
                    exhausted += 1;
                    assignments.push(
                        LabelAssignment::new(
                            &doc.id,
                            other_index,
                            OTHER_LABEL,
                            BTreeSet::from([other_index]),
                            AssignmentSource::Llm,
                            &self.rater_id,
                        )
                        .with_flag(EXHAUSTED_FLAG),
                    );
                }
                Err(other) => return Err(other),
            }
        }

        if exhausted * 2 > assignments.len() {
            return Err(Error::pipeline(
                "annotate",
                format!(
                    "{exhausted} of {} documents exhausted their retries",
                    assignments.len()
                ),
            ));
        }
        Ok(PseudoLabeledDataset {
            taxonomy: tax,
            assignments,
            split_assignment: sample.split_assignment.clone(),
        })
    }
}
