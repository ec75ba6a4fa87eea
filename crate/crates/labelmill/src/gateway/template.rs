//! Prompt templates: `{slot}` substitution over authored bodies.
//!
//! The nine pipeline prompts ship with the crate and can be overridden from a
//! directory of `<name>.txt` files. Rendering is a single pass: a slot value
//! containing `{...}` is inserted literally, never re-expanded.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gateway::TemplateName;

pub type Slots = BTreeMap<String, String>;

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
    pub required_slots: Vec<String>,
    /// Tag the reply payload is wrapped in, without angle brackets.
    pub output_tag: String,
}

impl PromptTemplate {
    /// Every required slot must appear as `{slot}` in the body.
    pub fn new(
        name: TemplateName,
        body: &str,
        required_slots: &[&str],
        output_tag: &str,
    ) -> Result<Self> {
        for slot in required_slots {
            if !body.contains(&format!("{{{slot}}}")) {
                return Err(Error::SlotNotInBody {
                    template: name.to_string(),
                    slot: slot.to_string(),
                });
            }
        }
        Ok(PromptTemplate {
            name,
            body: body.to_string(),
            required_slots: required_slots.iter().map(|s| s.to_string()).collect(),
            output_tag: output_tag.to_string(),
        })
    }

    /// Substitute every provided slot; missing required slots are an error
    /// naming the slot. `{...}` sequences that match no provided slot stay
    /// verbatim.
    pub fn render(&self, slots: &Slots) -> Result<String> {
        for required in &self.required_slots {
            if !slots.contains_key(required) {
                return Err(Error::MissingSlot {
                    template: self.name.to_string(),
                    slot: required.clone(),
                });
            }
        }
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find(['{', '}']) {
                Some(close) if after.as_bytes()[close] == b'}' => {
                    let key = &after[..close];
                    if let Some(value) = slots.get(key) {
                        out.push_str(value);
                    } else {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                    rest = &after[close + 1..];
                }
                _ => {
                    // Unclosed or nested brace: emit literally and move on.
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Slot lists for the built-in prompt set.
fn required_slots(name: TemplateName) -> &'static [&'static str] {
    match name {
        TemplateName::Summarize => &["use_case", "word_target", "text"],
        TemplateName::Generate => &[
            "use_case",
            "target_count",
            "max_count",
            "max_words_per_name",
            "summaries",
        ],
        TemplateName::Update => &[
            "use_case",
            "target_count",
            "max_count",
            "max_words_per_name",
            "current_taxonomy",
            "summaries",
        ],
        TemplateName::Review => &[
            "use_case",
            "target_count",
            "max_count",
            "max_words_per_name",
            "current_taxonomy",
        ],
        TemplateName::Assign => &["use_case", "taxonomy", "document", "mode_instruction"],
        TemplateName::Select => &["use_case", "requirements", "summaries", "candidates"],
        TemplateName::PairAccuracy => &["document", "option_one", "option_two"],
        TemplateName::Relevance => &["use_case", "document", "label"],
        TemplateName::ClusterName => &["use_case", "summaries"],
    }
}

fn builtin_body(name: TemplateName) -> &'static str {
    match name {
        TemplateName::Summarize => include_str!("../../prompts/summarize.txt"),
        TemplateName::Generate => include_str!("../../prompts/generate.txt"),
        TemplateName::Update => include_str!("../../prompts/update.txt"),
        TemplateName::Review => include_str!("../../prompts/review.txt"),
        TemplateName::Assign => include_str!("../../prompts/assign.txt"),
        TemplateName::Select => include_str!("../../prompts/select.txt"),
        TemplateName::PairAccuracy => include_str!("../../prompts/pair_accuracy.txt"),
        TemplateName::Relevance => include_str!("../../prompts/relevance.txt"),
        TemplateName::ClusterName => include_str!("../../prompts/cluster_name.txt"),
    }
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl PromptLibrary {
    /// The authored prompt set compiled into the crate.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for name in TemplateName::ALL {
            let template = PromptTemplate::new(name, builtin_body(name), required_slots(name), "output")
                .expect("built-in template bodies declare all required slots");
            templates.insert(name, template);
        }
        PromptLibrary { templates }
    }

    /// Replace bodies with `<name>.txt` files found under `dir`; templates
    /// without an override keep the built-in body. Overrides must still
    /// declare every required slot.
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<Self> {
        let mut lib = Self::builtin();
        for name in TemplateName::ALL {
            let path = dir.as_ref().join(format!("{name}.txt"));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|source| Error::IoPath {
                    path: path.clone(),
                    source,
                })?;
                let template = PromptTemplate::new(name, &body, required_slots(name), "output")?;
                lib.templates.insert(name, template);
            }
        }
        Ok(lib)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        // All nine templates exist by construction.
        &self.templates[&name]
    }
}

/// Convenience constructor for slot maps.
pub fn slots(pairs: &[(&str, &str)]) -> Slots {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
