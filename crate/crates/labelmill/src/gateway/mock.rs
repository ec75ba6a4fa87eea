//! Offline chat backends for deterministic runs and tests.
//!
//! `ScriptedBackend` replays canned responses keyed by `(template, attempt)`
//! from a jsonl fixture — exact control over every exchange, including
//! deliberately malformed attempts to exercise the retry path.
//! `RuleBackend` synthesizes plausible responses for every template from a
//! small set of keyword-to-label rules, which is enough to drive the whole
//! pipeline end to end without a network.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::gateway::backend::{BackendError, ChatBackend, CompletionRequest};
use crate::gateway::TemplateName;
use crate::taxonomy::{self, Label, Taxonomy};

/// One completed (or refused) call, as seen by a mock backend.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub template: TemplateName,
    pub attempt: u32,
    pub temperature: f64,
    pub prompt: String,
}

fn record_call(log: &Mutex<Vec<CallRecord>>, req: &CompletionRequest) {
    log.lock().expect("call log poisoned").push(CallRecord {
        template: req.template,
        attempt: req.attempt,
        temperature: req.temperature,
        prompt: req.prompt(),
    });
}

#[derive(Debug, Deserialize)]
struct ScriptLine {
    template: String,
    attempt: u32,
    response: String,
}

/// Replays fixture responses keyed by `(template, attempt)`.
///
/// A request with no matching script is refused with
/// [`BackendError::NoScript`], which counts against the caller's retry
/// budget like any other failed attempt.
#[derive(Debug)]
pub struct ScriptedBackend {
    scripts: HashMap<(String, u32), String>,
    calls: Mutex<Vec<CallRecord>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        ScriptedBackend {
            scripts: HashMap::new(),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Register the response for one `(template, attempt)` slot.
    pub fn script(mut self, template: TemplateName, attempt: u32, response: &str) -> Self {
        self.scripts
            .insert((template.as_str().to_string(), attempt), response.to_string());
        self
    }

    /// Load scripts from a jsonl fixture of `{template, attempt, response}`
    /// records. Blank lines are skipped; duplicate keys are an error.
    pub fn from_jsonl_reader<R: Read>(reader: R) -> Result<Self> {
        let mut backend = ScriptedBackend::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ScriptLine = serde_json::from_str(&line).map_err(|e| Error::Record {
                line: i + 1,
                reason: e.to_string(),
            })?;
            let template: TemplateName = record.template.parse().map_err(|_| Error::Record {
                line: i + 1,
                reason: format!("unknown template `{}`", record.template),
            })?;
            if record.attempt == 0 {
                return Err(Error::Record {
                    line: i + 1,
                    reason: "attempt numbers start at 1".to_string(),
                });
            }
            let key = (template.as_str().to_string(), record.attempt);
            if backend.scripts.insert(key, record.response).is_some() {
                return Err(Error::Record {
                    line: i + 1,
                    reason: format!(
                        "duplicate script for template `{}` attempt {}",
                        record.template, record.attempt
                    ),
                });
            }
        }
        Ok(backend)
    }

    pub fn from_jsonl_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::IoPath {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_jsonl_reader(file)
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("call log poisoned").len()
    }
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".to_string()
    }

    fn complete(&self, req: &CompletionRequest) -> std::result::Result<String, BackendError> {
        record_call(&self.calls, req);
        let key = (req.template.as_str().to_string(), req.attempt);
        match self.scripts.get(&key) {
            Some(response) => Ok(response.clone()),
            None => Err(BackendError::NoScript {
                template: req.template.as_str().to_string(),
                attempt: req.attempt,
            }),
        }
    }
}

/// One keyword-triggered topic the [`RuleBackend`] knows how to talk about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicRule {
    /// Case-insensitive substring that marks a document as this topic.
    pub keyword: String,
    pub name: String,
    pub description: String,
}

impl TopicRule {
    pub fn new(keyword: &str, name: &str, description: &str) -> Self {
        TopicRule {
            keyword: keyword.to_string(),
            name: name.to_string(),
            description: description.to_string(),
        }
    }
}

/// Synthesizes responses for every template from keyword rules.
///
/// Summaries always mention the matched keyword, taxonomies are built from
/// whichever rules the batch mentions, and assignments look the correct row
/// up in the prompt's own label table — so a full pipeline run over a corpus
/// written against the same rules behaves like a competent model would.
pub struct RuleBackend {
    rules: Vec<TopicRule>,
    calls: Mutex<Vec<CallRecord>>,
}

impl RuleBackend {
    pub fn new(rules: Vec<TopicRule>) -> Self {
        RuleBackend {
            rules,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("call log poisoned").len()
    }

    /// First rule (declaration order) whose keyword appears in `text`.
    fn match_rule(&self, text: &str) -> Option<&TopicRule> {
        let lower = text.to_lowercase();
        self.rules
            .iter()
            .find(|r| lower.contains(&r.keyword.to_lowercase()))
    }

    /// All rules mentioned anywhere in `text`, in declaration order.
    fn matched_rules(&self, text: &str) -> Vec<&TopicRule> {
        let lower = text.to_lowercase();
        self.rules
            .iter()
            .filter(|r| lower.contains(&r.keyword.to_lowercase()))
            .collect()
    }

    fn rules_to_table(rules: &[&TopicRule]) -> String {
        let labels: Vec<Label> = rules
            .iter()
            .enumerate()
            .map(|(i, r)| Label::new(i as u32 + 1, &r.name, &r.description))
            .collect();
        let labels = if labels.is_empty() {
            vec![Label::new(
                1,
                "General",
                "Documents without a clearer theme.",
            )]
        } else {
            labels
        };
        taxonomy::to_markdown(&Taxonomy::new(labels, "synthesized"))
            .expect("non-empty taxonomy always encodes")
    }

    fn reply_summarize(&self, prompt: &str) -> String {
        let doc = section(prompt, "document").unwrap_or_default();
        match self.match_rule(&doc) {
            Some(rule) => format!("The user asks about {}.", rule.keyword),
            None => "A general request with no clear topic.".to_string(),
        }
    }

    fn reply_generate(&self, prompt: &str) -> String {
        let summaries = section(prompt, "summaries").unwrap_or_default();
        Self::rules_to_table(&self.matched_rules(&summaries))
    }

    fn reply_update(&self, prompt: &str) -> String {
        let current = section(prompt, "current_taxonomy").unwrap_or_default();
        let summaries = section(prompt, "summaries").unwrap_or_default();
        let mut labels: Vec<Label> = match taxonomy::from_markdown(&current, "synthesized") {
            Ok(t) => t.labels,
            Err(_) => Vec::new(),
        };
        for rule in self.matched_rules(&summaries) {
            let known = labels
                .iter()
                .any(|l| l.name.eq_ignore_ascii_case(&rule.name));
            if !known {
                labels.push(Label::new(labels.len() as u32 + 1, &rule.name, &rule.description));
            }
        }
        if labels.is_empty() {
            return Self::rules_to_table(&[]);
        }
        let labels: Vec<Label> = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| Label::new(i as u32 + 1, &l.name, &l.description))
            .collect();
        taxonomy::to_markdown(&Taxonomy::new(labels, "synthesized"))
            .expect("non-empty taxonomy always encodes")
    }

    fn reply_review(&self, prompt: &str) -> String {
        let current = section(prompt, "current_taxonomy").unwrap_or_default();
        match taxonomy::from_markdown(&current, "synthesized") {
            Ok(t) => taxonomy::to_markdown(&t).expect("parsed taxonomy re-encodes"),
            Err(_) => current,
        }
    }

    fn reply_assign(&self, prompt: &str) -> String {
        let doc = section(prompt, "document").unwrap_or_default();
        let rows = table_rows(prompt);
        let target = self
            .match_rule(&doc)
            .and_then(|rule| {
                rows.iter()
                    .find(|(_, name)| name.eq_ignore_ascii_case(&rule.name))
            })
            .or_else(|| {
                rows.iter()
                    .find(|(_, name)| name.eq_ignore_ascii_case(taxonomy::OTHER_LABEL))
            })
            .or_else(|| rows.first());
        match target {
            Some((index, name)) => {
                format!("primary: ({index}, {name})\nall: ({index}, {name})")
            }
            None => "primary: (1, Other)".to_string(),
        }
    }

    fn reply_select(&self, prompt: &str) -> String {
        let candidates = section(prompt, "candidates").unwrap_or_default();
        let blocks = candidate_blocks(&candidates);
        let mut best = 1usize;
        let mut best_score = -1i64;
        for (index, body) in &blocks {
            let lower = body.to_lowercase();
            let score = self
                .rules
                .iter()
                .filter(|r| lower.contains(&r.name.to_lowercase()))
                .count() as i64;
            if score > best_score {
                best_score = score;
                best = *index;
            }
        }
        format!("{best}")
    }

    fn reply_pair(&self, prompt: &str) -> String {
        let doc = section(prompt, "document").unwrap_or_default();
        let one = section(prompt, "option_one").unwrap_or_default();
        let two = section(prompt, "option_two").unwrap_or_default();
        match self.match_rule(&doc) {
            Some(rule) => {
                let name = rule.name.to_lowercase();
                if one.to_lowercase().contains(&name) {
                    "1".to_string()
                } else if two.to_lowercase().contains(&name) {
                    "2".to_string()
                } else {
                    "none".to_string()
                }
            }
            None => "none".to_string(),
        }
    }

    fn reply_relevance(&self, prompt: &str) -> String {
        let doc = section(prompt, "document").unwrap_or_default();
        let label = section(prompt, "label").unwrap_or_default();
        match self.match_rule(&doc) {
            Some(rule) if label.to_lowercase().contains(&rule.name.to_lowercase()) => {
                "relevant".to_string()
            }
            _ => "not_relevant".to_string(),
        }
    }

    fn reply_cluster_name(&self, prompt: &str) -> String {
        let summaries = section(prompt, "summaries").unwrap_or_default();
        let mut counts = vec![0usize; self.rules.len()];
        for line in summaries.lines() {
            let lower = line.to_lowercase();
            if let Some(i) = self
                .rules
                .iter()
                .position(|r| lower.contains(&r.keyword.to_lowercase()))
            {
                counts[i] += 1;
            }
        }
        let winner = counts
            .iter()
            .enumerate()
            .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia)))
            .filter(|(_, c)| **c > 0)
            .map(|(i, _)| &self.rules[i]);
        match winner {
            Some(rule) => format!("name: {}\ndescription: {}", rule.name, rule.description),
            None => {
                "name: Mixed Topics\ndescription: A group of documents with no dominant theme."
                    .to_string()
            }
        }
    }
}

impl ChatBackend for RuleBackend {
    fn id(&self) -> String {
        "rule-mock".to_string()
    }

    fn complete(&self, req: &CompletionRequest) -> std::result::Result<String, BackendError> {
        record_call(&self.calls, req);
        let prompt = req.prompt();
        let body = match req.template {
            TemplateName::Summarize => self.reply_summarize(&prompt),
            TemplateName::Generate => self.reply_generate(&prompt),
            TemplateName::Update => self.reply_update(&prompt),
            TemplateName::Review => self.reply_review(&prompt),
            TemplateName::Assign => self.reply_assign(&prompt),
            TemplateName::Select => self.reply_select(&prompt),
            TemplateName::PairAccuracy => self.reply_pair(&prompt),
            TemplateName::Relevance => self.reply_relevance(&prompt),
            TemplateName::ClusterName => self.reply_cluster_name(&prompt),
        };
        Ok(format!("<output>\n{body}\n</output>"))
    }
}

/// Content of the `<tag>...</tag>` block in a rendered prompt.
///
/// Prompts mention tags in prose ("between the `<document>` tags"), so the
/// block is located from its closing tag backwards: prose never closes a tag.
fn section(prompt: &str, tag: &str) -> Option<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let end = prompt.find(&close)?;
    let start = prompt[..end].rfind(&open)?;
    Some(prompt[start + open.len()..end].trim().to_string())
}

/// Every `| index | name | ... |` row found anywhere in the prompt, so the
/// lookup still works when a long label table is split across turns.
fn table_rows(prompt: &str) -> Vec<(usize, String)> {
    let mut rows = Vec::new();
    for line in prompt.lines() {
        let trimmed = line.trim();
        if !trimmed.starts_with('|') {
            continue;
        }
        let cells = taxonomy::split_row(trimmed);
        if cells.len() < 2 || taxonomy::is_separator_row(&cells) {
            continue;
        }
        if let Ok(index) = cells[0].trim().parse::<usize>() {
            rows.push((index, taxonomy::unescape_cell(cells[1].trim())));
        }
    }
    rows
}

/// Split `<candidate index="N">...</candidate>` blocks out of the candidates
/// section, tolerating malformed blocks by skipping them.
fn candidate_blocks(candidates: &str) -> Vec<(usize, String)> {
    let mut blocks = Vec::new();
    let mut rest = candidates;
    while let Some(start) = rest.find("<candidate index=\"") {
        let after = &rest[start + "<candidate index=\"".len()..];
        let Some(quote) = after.find('"') else { break };
        let index: Option<usize> = after[..quote].parse().ok();
        let Some(tag_end) = after.find('>') else { break };
        let body_start = &after[tag_end + 1..];
        let Some(close) = body_start.find("</candidate>") else {
            break;
        };
        if let Some(index) = index {
            blocks.push((index, body_start[..close].trim().to_string()));
        }
        rest = &body_start[close + "</candidate>".len()..];
    }
    blocks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(template: TemplateName, attempt: u32, prompt: &str) -> CompletionRequest {
        CompletionRequest {
            template,
            turns: vec![prompt.to_string()],
            attempt,
            temperature: 0.0,
            top_p: 0.5,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            max_output_tokens: 512,
        }
    }

    #[test]
    fn scripted_replays_by_template_and_attempt() {
        let backend = ScriptedBackend::new()
            .script(TemplateName::Summarize, 1, "first")
            .script(TemplateName::Summarize, 2, "second");
        let r1 = backend.complete(&req(TemplateName::Summarize, 1, "p")).unwrap();
        let r2 = backend.complete(&req(TemplateName::Summarize, 2, "p")).unwrap();
        assert_eq!((r1.as_str(), r2.as_str()), ("first", "second"));
        assert_eq!(backend.call_count(), 2);
    }

    #[test]
    fn scripted_miss_is_a_noscript_error() {
        let backend = ScriptedBackend::new();
        let err = backend
            .complete(&req(TemplateName::Generate, 1, "p"))
            .unwrap_err();
        match err {
            BackendError::NoScript { template, attempt } => {
                assert_eq!(template, "generate");
                assert_eq!(attempt, 1);
            }
            other => panic!("expected NoScript, got {other:?}"),
        }
        // The refused call still shows up in the log.
        assert_eq!(backend.call_count(), 1);
    }

    #[test]
    fn scripted_fixture_loads_and_rejects_duplicates() {
        let good = concat!(
            r#"{"template": "summarize", "attempt": 1, "response": "<output>ok</output>"}"#,
            "\n\n",
            r#"{"template": "generate", "attempt": 1, "response": "<output>t</output>"}"#,
            "\n",
        );
        let backend = ScriptedBackend::from_jsonl_reader(good.as_bytes()).unwrap();
        assert_eq!(
            backend
                .complete(&req(TemplateName::Summarize, 1, "p"))
                .unwrap(),
            "<output>ok</output>"
        );

        let dup = concat!(
            r#"{"template": "summarize", "attempt": 1, "response": "a"}"#,
            "\n",
            r#"{"template": "summarize", "attempt": 1, "response": "b"}"#,
            "\n",
        );
        let err = ScriptedBackend::from_jsonl_reader(dup.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let bad_template = r#"{"template": "nonsense", "attempt": 1, "response": "a"}"#;
        assert!(ScriptedBackend::from_jsonl_reader(bad_template.as_bytes()).is_err());
    }

    fn rules() -> Vec<TopicRule> {
        vec![
            TopicRule::new("refund", "Billing", "Payments and refunds."),
            TopicRule::new("parcel", "Shipping", "Parcel tracking."),
        ]
    }

    #[test]
    fn rule_summarize_mentions_keyword() {
        let backend = RuleBackend::new(rules());
        let prompt = "Summarize the document.\n<document>\nWhere is my refund?\n</document>";
        let out = backend
            .complete(&req(TemplateName::Summarize, 1, prompt))
            .unwrap();
        assert!(out.contains("refund"), "{out}");
        assert!(out.starts_with("<output>"));
    }

    #[test]
    fn rule_generate_builds_table_from_mentions() {
        let backend = RuleBackend::new(rules());
        let prompt = "<summaries>\nThe user asks about refund.\nThe user asks about parcel.\n</summaries>";
        let out = backend
            .complete(&req(TemplateName::Generate, 1, prompt))
            .unwrap();
        let body = crate::gateway::guardrail::extract_tagged(&out, "output").unwrap();
        let t = taxonomy::from_markdown(&body, "uc").unwrap();
        let names: Vec<&str> = t.labels.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, vec!["Billing", "Shipping"]);
    }

    #[test]
    fn rule_update_appends_only_new_topics() {
        let backend = RuleBackend::new(rules());
        let current = "| index | name | description |\n| --- | --- | --- |\n| 1 | Billing | Payments and refunds. |";
        let prompt = format!(
            "prose about the <current_taxonomy> tags\n\n<current_taxonomy>\n{current}\n</current_taxonomy>\n\n<summaries>\nasks about parcel\nasks about refund\n</summaries>"
        );
        let out = backend
            .complete(&req(TemplateName::Update, 1, &prompt))
            .unwrap();
        let body = crate::gateway::guardrail::extract_tagged(&out, "output").unwrap();
        let t = taxonomy::from_markdown(&body, "uc").unwrap();
        let names: Vec<&str> = t.labels.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, vec!["Billing", "Shipping"]);
    }

    #[test]
    fn rule_assign_reads_the_prompt_table() {
        let backend = RuleBackend::new(rules());
        let prompt = "<taxonomy>\n| index | name | description |\n| --- | --- | --- |\n| 1 | Shipping | Parcel tracking. |\n| 2 | Billing | Payments. |\n| 3 | Other | Anything else. |\n</taxonomy>\n<document>\nrefund please\n</document>";
        let out = backend
            .complete(&req(TemplateName::Assign, 1, prompt))
            .unwrap();
        assert!(out.contains("primary: (2, Billing)"), "{out}");

        let other = "<taxonomy>\n| index | name | description |\n| --- | --- | --- |\n| 1 | Shipping | Parcel tracking. |\n| 2 | Other | Anything else. |\n</taxonomy>\n<document>\nsomething unrelated\n</document>";
        let out = backend.complete(&req(TemplateName::Assign, 1, other)).unwrap();
        assert!(out.contains("primary: (2, Other)"), "{out}");
    }

    #[test]
    fn rule_select_prefers_candidate_covering_more_topics() {
        let backend = RuleBackend::new(rules());
        let prompt = "<candidates>\n<candidate index=\"1\">\n| 1 | Billing | x |\n</candidate>\n<candidate index=\"2\">\n| 1 | Billing | x |\n| 2 | Shipping | y |\n</candidate>\n</candidates>";
        let out = backend
            .complete(&req(TemplateName::Select, 1, prompt))
            .unwrap();
        let body = crate::gateway::guardrail::extract_tagged(&out, "output").unwrap();
        assert_eq!(body, "2");
    }

    #[test]
    fn rule_pair_and_relevance_follow_the_matched_topic() {
        let backend = RuleBackend::new(rules());
        let pair = "<document>\nmy parcel is lost\n</document>\n<option_one>\nBilling: payments\n</option_one>\n<option_two>\nShipping: parcels\n</option_two>";
        let out = backend
            .complete(&req(TemplateName::PairAccuracy, 1, pair))
            .unwrap();
        assert!(out.contains("2"), "{out}");

        let rel = "<document>\nmy parcel is lost\n</document>\n<label>\nShipping: parcel tracking\n</label>";
        let out = backend
            .complete(&req(TemplateName::Relevance, 1, rel))
            .unwrap();
        assert!(out.contains(">\nrelevant") || out.contains("relevant"), "{out}");

        let irrel = "<document>\nmy parcel is lost\n</document>\n<label>\nBilling: payments\n</label>";
        let out = backend
            .complete(&req(TemplateName::Relevance, 1, irrel))
            .unwrap();
        assert!(out.contains("not_relevant"), "{out}");
    }

    #[test]
    fn rule_cluster_name_picks_majority_topic() {
        let backend = RuleBackend::new(rules());
        let prompt = "<summaries>\nasks about parcel\nasks about parcel\nasks about refund\n</summaries>";
        let out = backend
            .complete(&req(TemplateName::ClusterName, 1, prompt))
            .unwrap();
        let body = crate::gateway::guardrail::extract_tagged(&out, "output").unwrap();
        let parsed = crate::gateway::payload::parse_cluster_name(&body).unwrap();
        assert_eq!(parsed.0, "Shipping");
    }

    #[test]
    fn section_skips_prose_mentions() {
        let prompt = "shown between the <document> tags.\n<document>\nreal body\n</document>";
        assert_eq!(section(prompt, "document").unwrap(), "real body");
        assert_eq!(section(prompt, "missing"), None);
    }
}
