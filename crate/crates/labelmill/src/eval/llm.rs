//! LLM raters: run the same pairwise-accuracy and relevance tasks a human
//! rater would see, through the guarded gateway.
//!
//! Position bias is handled upstream — the balanced task schedule shows each
//! pair in both orders equally often — so the rater here simply renders the
//! options in the task's scheduled order. A task that exhausts its retries is
//! recorded as `none` (pairwise) or not-relevant (relevance), never dropped.

use std::collections::BTreeMap;

use crate::corpus::CorpusSample;
use crate::error::{Error, Result};
use crate::eval::pairwise::{
    PairwiseTask, Position, RaterResponse, RelevanceResponse, RelevanceTask,
};
use crate::gateway::{
    ChatJob, Gateway, GenerationSettings, GuardrailCheck, GuardrailSpec, PairChoice, PayloadKind,
    PromptLibrary, TemplateName,
};
use crate::taxonomy::Label;

fn option_text(label: &Label) -> String {
    format!("{}: {}", label.name, label.description)
}

/// Rates evaluation tasks with a model instead of a person.
pub struct LlmRater<'a> {
    gateway: &'a Gateway,
    prompts: &'a PromptLibrary,
    pub settings: GenerationSettings,
    pub max_in_flight: usize,
    pub rater_id: String,
    pub use_case: String,
}

impl<'a> LlmRater<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptLibrary, use_case: &str) -> Self {
        LlmRater {
            gateway,
            prompts,
            settings: GenerationSettings::default(),
            max_in_flight: 4,
            rater_id: "llm-rater".to_string(),
            use_case: use_case.to_string(),
        }
    }

    fn doc_texts(sample: &CorpusSample) -> BTreeMap<&str, &str> {
        sample
            .documents
            .iter()
            .map(|d| (d.id.as_str(), d.text.as_str()))
            .collect()
    }

    /// Answer every pairwise task. Exhausted tasks come back as `none`.
    pub fn rate_pairwise(
        &self,
        tasks: &[PairwiseTask],
        sample: &CorpusSample,
    ) -> Result<Vec<RaterResponse>> {
        let texts = Self::doc_texts(sample);
        let template = self.prompts.get(TemplateName::PairAccuracy);
        let jobs: Vec<ChatJob> = tasks
            .iter()
            .map(|task| {
                let text = texts.get(task.doc_id.as_str()).ok_or_else(|| {
                    Error::invalid(format!("task `{}`: document not in sample", task.task_id))
                })?;
                let (first, second) = match task.presentation_order {
                    Position::PosFirst => (&task.positive, &task.negative),
                    Position::NegFirst => (&task.negative, &task.positive),
                };
                let rendered = template.render(&crate::gateway::slots(&[
                    ("document", text),
                    ("option_one", &option_text(first)),
                    ("option_two", &option_text(second)),
                ]))?;
                Ok(ChatJob::new(
                    TemplateName::PairAccuracy,
                    vec![rendered],
                    self.settings.clone(),
                    GuardrailSpec::new(vec![GuardrailCheck::FormatParse {
                        payload: PayloadKind::PairChoice,
                    }]),
                ))
            })
            .collect::<Result<_>>()?;

        let mut responses = Vec::with_capacity(tasks.len());
        for (task, outcome) in tasks
            .iter()
            .zip(self.gateway.complete_batch(&jobs, self.max_in_flight)?)
        {
            let choice = match outcome {
                Ok(exchange) => {
                    let payload = exchange.extracted.as_deref().expect("successful exchange");
                    crate::gateway::parse_pair_choice(payload)?
                }
                Err(Error::Exhausted { exchange }) => {
                    log::warn!(
                        "task `{}` exhausted after {} attempts, recording `none`",
                        task.task_id,
                        exchange.attempts
                    );
                    PairChoice::Neither
                }
                Err(other) => return Err(other),
            };
            responses.push(RaterResponse {
                task_id: task.task_id.clone(),
                rater_id: self.rater_id.clone(),
                choice,
            });
        }
        Ok(responses)
    }

    /// Answer every relevance task. Exhausted tasks are recorded as
    /// not-relevant, the conservative miss.
    pub fn rate_relevance(
        &self,
        tasks: &[RelevanceTask],
        sample: &CorpusSample,
    ) -> Result<Vec<RelevanceResponse>> {
        let texts = Self::doc_texts(sample);
        let template = self.prompts.get(TemplateName::Relevance);
        let jobs: Vec<ChatJob> = tasks
            .iter()
            .map(|task| {
                let text = texts.get(task.doc_id.as_str()).ok_or_else(|| {
                    Error::invalid(format!("task `{}`: document not in sample", task.task_id))
                })?;
                let rendered = template.render(&crate::gateway::slots(&[
                    ("use_case", &self.use_case),
                    ("document", text),
                    ("label", &option_text(&task.label)),
                ]))?;
                Ok(ChatJob::new(
                    TemplateName::Relevance,
                    vec![rendered],
                    self.settings.clone(),
                    GuardrailSpec::new(vec![GuardrailCheck::FormatParse {
                        payload: PayloadKind::RelevanceVerdict,
                    }]),
                ))
            })
            .collect::<Result<_>>()?;

        let mut responses = Vec::with_capacity(tasks.len());
        for (task, outcome) in tasks
            .iter()
            .zip(self.gateway.complete_batch(&jobs, self.max_in_flight)?)
        {
            let relevant = match outcome {
                Ok(exchange) => {
                    let payload = exchange.extracted.as_deref().expect("successful exchange");
                    crate::gateway::parse_relevance(payload)?
                }
                Err(Error::Exhausted { exchange }) => {
                    log::warn!(
                        "task `{}` exhausted after {} attempts, recording not-relevant",
                        task.task_id,
                        exchange.attempts
                    );
                    false
                }
                Err(other) => return Err(other),
            };
            responses.push(RelevanceResponse {
                task_id: task.task_id.clone(),
                rater_id: self.rater_id.clone(),
                relevant,
            });
        }
        Ok(responses)
    }
}
