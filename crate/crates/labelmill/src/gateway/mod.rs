//! The LLM gateway: prompt templates, chat backends, and the guarded
//! retry loop that every model call in the pipeline goes through.
//!
//! A call is described by a template, its rendered turns, generation
//! settings, and a non-empty set of guardrails. On each attempt the raw
//! response is reduced to its `<output>` payload and checked; any failure
//! retries the call at a temperature one step higher, up to the retry
//! budget. Exhaustion surfaces the full per-attempt record so callers can
//! decide whether to degrade or abort.

pub mod backend;
pub mod guardrail;
pub mod mock;
pub mod payload;
pub mod template;

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::corpus::LanguageDetector;
use crate::error::{Error, Result};

pub use backend::{
    BackendError, ChatBackend, CompletionRequest, FnBackend, HttpChatBackend, API_KEY_ENV,
};
pub use guardrail::{
    extract_tagged, run_guardrails, GuardrailCheck, GuardrailFailure, GuardrailSpec, PayloadKind,
};
pub use payload::{
    parse_assignment, parse_choice, parse_cluster_name, parse_pair_choice, parse_relevance,
    AssignmentReply, PairChoice,
};
pub use template::{slots, PromptLibrary, PromptTemplate, Slots};

/// The nine prompt templates the pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Summarize,
    Generate,
    Update,
    Review,
    Assign,
    Select,
    PairAccuracy,
    Relevance,
    ClusterName,
}

impl TemplateName {
    pub const ALL: [TemplateName; 9] = [
        TemplateName::Summarize,
        TemplateName::Generate,
        TemplateName::Update,
        TemplateName::Review,
        TemplateName::Assign,
        TemplateName::Select,
        TemplateName::PairAccuracy,
        TemplateName::Relevance,
        TemplateName::ClusterName,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateName::Summarize => "summarize",
            TemplateName::Generate => "generate",
            TemplateName::Update => "update",
            TemplateName::Review => "review",
            TemplateName::Assign => "assign",
            TemplateName::Select => "select",
            TemplateName::PairAccuracy => "pair_accuracy",
            TemplateName::Relevance => "relevance",
            TemplateName::ClusterName => "cluster_name",
        }
    }
}

impl std::fmt::Display for TemplateName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateName::ALL
            .iter()
            .find(|t| t.as_str() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown template `{s}`")))
    }
}

/// Sampling and retry settings for one call.
///
/// Attempt `k` (1-based) runs at `base_temperature + (k - 1) * temperature_step`;
/// a call makes at most `max_retries + 1` attempts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub base_temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub max_output_tokens: u32,
    pub max_retries: u32,
    pub temperature_step: f64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            base_temperature: 0.0,
            top_p: 0.5,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            max_output_tokens: 2048,
            max_retries: 5,
            temperature_step: 0.1,
        }
    }
}

impl GenerationSettings {
    pub fn with_base_temperature(base_temperature: f64) -> Self {
        GenerationSettings {
            base_temperature,
            ..GenerationSettings::default()
        }
    }

    /// Temperature for 1-based attempt `k`. No clamping: the schedule is the
    /// exact arithmetic sequence, and validation bounds where it can end up.
    pub fn temperature_for_attempt(&self, attempt: u32) -> f64 {
        self.base_temperature + f64::from(attempt - 1) * self.temperature_step
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.base_temperature) {
            return Err(Error::Config(format!(
                "base_temperature {} outside [0, 2]",
                self.base_temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(Error::Config(format!("top_p {} outside [0, 1]", self.top_p)));
        }
        if self.temperature_step < 0.0 {
            return Err(Error::Config(format!(
                "temperature_step {} must be non-negative",
                self.temperature_step
            )));
        }
        let ceiling = self.temperature_for_attempt(self.max_retries + 1);
        if ceiling > 2.0 {
            return Err(Error::Config(format!(
                "final retry temperature {ceiling} exceeds 2.0; lower base_temperature, \
                 temperature_step, or max_retries"
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::Config("max_output_tokens must be positive".to_string()));
        }
        Ok(())
    }
}

/// One guardrail (or backend) failure on one attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttemptFailure {
    pub attempt: u32,
    pub check: String,
    pub detail: String,
}

/// Full record of one guarded call: every attempt, every temperature, every
/// failure, and the payload when an attempt passed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlmExchange {
    pub template: TemplateName,
    pub rendered_prompt: String,
    /// Raw response of the last attempt that got one.
    pub raw_response: Option<String>,
    /// The `<output>` payload of the passing attempt, `None` on exhaustion.
    pub extracted: Option<String>,
    pub attempts: u32,
    pub temperatures_used: Vec<f64>,
    pub guardrail_failures: Vec<AttemptFailure>,
}

impl LlmExchange {
    pub fn succeeded(&self) -> bool {
        self.extracted.is_some()
    }
}

/// One guarded call, ready to run: rendered turns plus settings and checks.
#[derive(Debug, Clone)]
pub struct ChatJob {
    pub template: TemplateName,
    pub turns: Vec<String>,
    pub settings: GenerationSettings,
    pub guardrails: GuardrailSpec,
}

impl ChatJob {
    pub fn new(
        template: TemplateName,
        turns: Vec<String>,
        settings: GenerationSettings,
        guardrails: GuardrailSpec,
    ) -> Self {
        ChatJob {
            template,
            turns,
            settings,
            guardrails,
        }
    }
}

/// Routes every model call through extraction, guardrails, and retries.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    detector: Arc<dyn LanguageDetector>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, detector: Arc<dyn LanguageDetector>) -> Self {
        Gateway { backend, detector }
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    /// Run one guarded call. `Ok` carries the passing exchange; exhaustion is
    /// `Err(Error::Exhausted)` carrying the complete attempt log. Backend
    /// failures (transport, API, missing script) consume retry budget exactly
    /// like guardrail failures.
    pub fn complete_with_retry(&self, job: &ChatJob) -> Result<LlmExchange> {
        if job.guardrails.checks.is_empty() {
            return Err(Error::invalid(format!(
                "refusing an unguarded `{}` call: every chained prompt needs at least one check",
                job.template
            )));
        }
        job.settings.validate()?;
        if job.turns.is_empty() || job.turns.iter().all(|t| t.trim().is_empty()) {
            return Err(Error::invalid(format!("empty prompt for `{}`", job.template)));
        }

        let mut exchange = LlmExchange {
            template: job.template,
            rendered_prompt: job.turns.join("\n\n"),
            raw_response: None,
            extracted: None,
            attempts: 0,
            temperatures_used: Vec::new(),
            guardrail_failures: Vec::new(),
        };

        let max_attempts = job.settings.max_retries + 1;
        for attempt in 1..=max_attempts {
            let temperature = job.settings.temperature_for_attempt(attempt);
            exchange.attempts = attempt;
            exchange.temperatures_used.push(temperature);

            let request = CompletionRequest {
                template: job.template,
                turns: job.turns.clone(),
                attempt,
                temperature,
                top_p: job.settings.top_p,
                frequency_penalty: job.settings.frequency_penalty,
                presence_penalty: job.settings.presence_penalty,
                max_output_tokens: job.settings.max_output_tokens,
            };

            let raw = match self.backend.complete(&request) {
                Ok(raw) => raw,
                Err(e) => {
                    log::warn!("{} attempt {attempt}: backend failure: {e}", job.template);
                    exchange.guardrail_failures.push(AttemptFailure {
                        attempt,
                        check: "backend".to_string(),
                        detail: e.to_string(),
                    });
                    continue;
                }
            };
            exchange.raw_response = Some(raw.clone());

            let payload = match extract_tagged(&raw, "output") {
                Ok(payload) => payload,
                Err(e) => {
                    log::warn!("{} attempt {attempt}: {e}", job.template);
                    exchange.guardrail_failures.push(AttemptFailure {
                        attempt,
                        check: "output_tag".to_string(),
                        detail: e.to_string(),
                    });
                    continue;
                }
            };

            let failures = run_guardrails(&payload, &job.guardrails, self.detector.as_ref());
            if failures.is_empty() {
                exchange.extracted = Some(payload);
                return Ok(exchange);
            }
            for f in failures {
                log::warn!("{} attempt {attempt}: {}: {}", job.template, f.check, f.detail);
                exchange.guardrail_failures.push(AttemptFailure {
                    attempt,
                    check: f.check,
                    detail: f.detail,
                });
            }
        }

        Err(Error::Exhausted {
            exchange: Box::new(exchange),
        })
    }

    /// Run many guarded calls on a bounded worker pool. Results come back in
    /// input order; one exhausted job never aborts the rest.
    pub fn complete_batch(
        &self,
        jobs: &[ChatJob],
        max_in_flight: usize,
    ) -> Result<Vec<Result<LlmExchange>>> {
        if max_in_flight == 0 {
            return Err(Error::invalid("max_in_flight must be at least 1"));
        }
        if jobs.is_empty() {
            return Ok(Vec::new());
        }

        let slots: Vec<Mutex<Option<Result<LlmExchange>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = max_in_flight.min(jobs.len());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let outcome = self.complete_with_retry(&jobs[i]);
                    *slots[i].lock().expect("result slot poisoned") = Some(outcome);
                });
            }
        });

        Ok(slots
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("result slot poisoned")
                    .expect("every job slot is filled")
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AsciiHeuristic;
    use crate::gateway::mock::ScriptedBackend;
    use std::sync::atomic::AtomicU32;

    fn free_text_spec() -> GuardrailSpec {
        GuardrailSpec::new(vec![GuardrailCheck::FormatParse {
            payload: PayloadKind::FreeText,
        }])
    }

    fn gateway(backend: Arc<dyn ChatBackend>) -> Gateway {
        Gateway::new(backend, Arc::new(AsciiHeuristic))
    }

    fn job(turns: &[&str], settings: GenerationSettings) -> ChatJob {
        ChatJob::new(
            TemplateName::Summarize,
            turns.iter().map(|t| t.to_string()).collect(),
            settings,
            free_text_spec(),
        )
    }

    #[test]
    fn template_names_roundtrip() {
        for t in TemplateName::ALL {
            let parsed: TemplateName = t.as_str().parse().unwrap();
            assert_eq!(parsed, t);
        }
        assert!("bogus".parse::<TemplateName>().is_err());
        assert_eq!(
            serde_json::to_string(&TemplateName::PairAccuracy).unwrap(),
            "\"pair_accuracy\""
        );
    }

    #[test]
    fn temperature_schedule_is_the_exact_arithmetic_sequence() {
        let settings = GenerationSettings::with_base_temperature(0.2);
        let expected = [0.2, 0.3, 0.4, 0.5];
        for (i, want) in expected.iter().enumerate() {
            let got = settings.temperature_for_attempt(i as u32 + 1);
            assert!(
                (got - want).abs() < 1e-12,
                "attempt {}: got {got}, want {want}",
                i + 1
            );
        }
    }

    #[test]
    fn settings_validation_catches_bad_values() {
        assert!(GenerationSettings::default().validate().is_ok());
        assert!(GenerationSettings::with_base_temperature(-0.1).validate().is_err());
        let mut s = GenerationSettings::with_base_temperature(1.9);
        // 1.9 + 5 * 0.1 = 2.4 > 2.0
        assert!(s.validate().is_err());
        s.max_retries = 1;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn first_attempt_success_uses_base_temperature() {
        let backend = Arc::new(FnBackend::new("ok", |req| {
            Ok(format!("<output>t={}</output>", req.temperature))
        }));
        let gw = gateway(backend);
        let exchange = gw
            .complete_with_retry(&job(&["p"], GenerationSettings::with_base_temperature(0.5)))
            .unwrap();
        assert_eq!(exchange.attempts, 1);
        assert_eq!(exchange.temperatures_used, vec![0.5]);
        assert_eq!(exchange.extracted.as_deref(), Some("t=0.5"));
        assert!(exchange.guardrail_failures.is_empty());
    }

    #[test]
    fn malformed_attempts_retry_at_higher_temperature() {
        let calls = AtomicU32::new(0);
        let backend = Arc::new(FnBackend::new("flaky", move |_req| {
            let n = calls.fetch_add(1, Ordering::SeqCst);
            if n < 2 {
                Ok("no tags here".to_string())
            } else {
                Ok("<output>fine</output>".to_string())
            }
        }));
        let gw = gateway(backend);
        let exchange = gw
            .complete_with_retry(&job(&["p"], GenerationSettings::with_base_temperature(0.0)))
            .unwrap();
        assert_eq!(exchange.attempts, 3);
        assert_eq!(exchange.temperatures_used.len(), 3);
        assert!((exchange.temperatures_used[2] - 0.2).abs() < 1e-12);
        assert_eq!(exchange.guardrail_failures.len(), 2);
        assert!(exchange
            .guardrail_failures
            .iter()
            .all(|f| f.check == "output_tag"));
        assert_eq!(exchange.extracted.as_deref(), Some("fine"));
    }

    #[test]
    fn exhaustion_carries_the_full_attempt_log() {
        let backend = Arc::new(FnBackend::new("hopeless", |_req| {
            Ok("<output></output>".to_string())
        }));
        let gw = gateway(backend);
        let err = gw
            .complete_with_retry(&job(&["p"], GenerationSettings::default()))
            .unwrap_err();
        match err {
            Error::Exhausted { exchange } => {
                assert_eq!(exchange.attempts, 6); // max_retries 5 + 1
                assert_eq!(exchange.temperatures_used.len(), 6);
                assert_eq!(exchange.guardrail_failures.len(), 6);
                assert!(exchange.extracted.is_none());
                assert!(exchange.guardrail_failures.iter().all(|f| f.check == "format_parse"));
            }
            other => panic!("expected Exhausted, got {other:?}"),
        }
    }

    #[test]
    fn missing_scripts_consume_retry_budget() {
        let backend = Arc::new(
            ScriptedBackend::new().script(TemplateName::Summarize, 3, "<output>late</output>"),
        );
        let gw = gateway(backend.clone());
        let exchange = gw
            .complete_with_retry(&job(&["p"], GenerationSettings::default()))
            .unwrap();
        assert_eq!(exchange.attempts, 3);
        assert_eq!(
            exchange
                .guardrail_failures
                .iter()
                .filter(|f| f.check == "backend")
                .count(),
            2
        );
        assert_eq!(exchange.extracted.as_deref(), Some("late"));
        assert_eq!(backend.call_count(), 3);
    }

    #[test]
    fn unguarded_calls_are_refused() {
        let backend = Arc::new(FnBackend::new("ok", |_| Ok("<output>x</output>".to_string())));
        let gw = gateway(backend);
        let bad = ChatJob::new(
            TemplateName::Summarize,
            vec!["p".to_string()],
            GenerationSettings::default(),
            GuardrailSpec::new(vec![]),
        );
        assert!(gw.complete_with_retry(&bad).is_err());
    }

    #[test]
    fn batch_preserves_input_order_and_isolates_failures() {
        let backend = Arc::new(FnBackend::new("echo", |req| {
            let p = req.prompt();
            if p.contains("poison") {
                Err(BackendError::Api("refused".to_string()))
            } else {
                Ok(format!("<output>{p}</output>"))
            }
        }));
        let gw = gateway(backend);
        let mut jobs = Vec::new();
        for i in 0..8 {
            let text = if i == 3 { "poison".to_string() } else { format!("job-{i}") };
            let mut s = GenerationSettings::default();
            s.max_retries = 1;
            jobs.push(job(&[&text], s));
        }
        let results = gw.complete_batch(&jobs, 3).unwrap();
        assert_eq!(results.len(), 8);
        for (i, result) in results.iter().enumerate() {
            if i == 3 {
                assert!(matches!(result, Err(Error::Exhausted { .. })));
            } else {
                let exchange = result.as_ref().unwrap();
                assert_eq!(exchange.extracted.as_deref(), Some(format!("job-{i}").as_str()));
            }
        }
    }

    #[test]
    fn batch_rejects_zero_workers_and_handles_empty_input() {
        let backend = Arc::new(FnBackend::new("ok", |_| Ok("<output>x</output>".to_string())));
        let gw = gateway(backend);
        assert!(gw.complete_batch(&[job(&["p"], GenerationSettings::default())], 0).is_err());
        assert!(gw.complete_batch(&[], 4).unwrap().is_empty());
    }
}
