//! Taxonomy creation: summarize a corpus, then fold summary minibatches
//! through a generate → update → … → review prompt chain.
//!
//! The update chain treats the taxonomy like model weights under SGD: each
//! minibatch nudges the current draft, a bad batch is skipped (the prior
//! draft survives), and a final review pass cleans up formatting. Because a
//! single chain can drift, the engine runs several independently seeded
//! trials and picks the winner with a selection prompt on a validation
//! batch; the same prompt tracks the best draft *within* a trial so a stale
//! chain can stop early instead of burning its remaining batches.
//!
//! Every gateway call made here is appended to a manifest (template, attempt
//! count, guardrail failures) so a run can be audited after the fact.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::LabelAssignment;
use crate::corpus::{CorpusSample, Document, Split};
use crate::error::{Error, Result};
use crate::gateway::{
    parse_choice, slots, ChatJob, Gateway, GenerationSettings, GuardrailCheck, GuardrailSpec,
    LlmExchange, PayloadKind, PromptLibrary, TemplateName,
};
use crate::taxonomy::{self, Label, Taxonomy, TaxonomyRequirements};

/// Base sampling temperatures per chain step. Generation explores, updates
/// stay conservative, everything else is deterministic; retries escalate
/// from these bases inside the gateway.
pub const GENERATE_TEMPERATURE: f64 = 0.5;
pub const UPDATE_TEMPERATURE: f64 = 0.2;
pub const REVIEW_TEMPERATURE: f64 = 0.0;
pub const SUMMARIZE_TEMPERATURE: f64 = 0.0;
pub const SELECT_TEMPERATURE: f64 = 0.0;

/// A summary may run past the word target by this factor before it is worth
/// a warning; the target is advisory, not a guardrail failure.
pub const WORD_TARGET_SAFETY: usize = 2;

/// Largest candidate list one selection prompt is asked to rank; bigger
/// fields run as a tournament of groups this size.
pub const MAX_SELECTION_GROUP: usize = 5;

/// Mixing constant for per-trial seeds (golden-ratio increment).
const TRIAL_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
/// Mixing constant for per-parent-label seeds during hierarchy expansion,
/// distinct from the trial mix so the two schedules never collide.
const SUBGROUP_SEED_MIX: u64 = 0xD1B5_4A32_D192_ED03;

/// One summarized document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub doc_id: String,
    pub text: String,
    pub language: String,
}

/// An ordered slice of summaries fed to one chain step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub summaries: Vec<Summary>,
    pub epoch: usize,
    pub batch_index: usize,
}

/// Chunk `summaries` into batches of `batch_size` (the final batch may be
/// short). Order is preserved; shuffle before calling if you need one.
pub fn make_minibatches(summaries: &[Summary], batch_size: usize, epoch: usize) -> Vec<Minibatch> {
    summaries
        .chunks(batch_size.max(1))
        .enumerate()
        .map(|(batch_index, chunk)| Minibatch {
            summaries: chunk.to_vec(),
            epoch,
            batch_index,
        })
        .collect()
}

/// One completed generate → update → review chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaxonomyTrial {
    pub trial_id: usize,
    pub seed: u64,
    /// Every taxonomy the chain produced, labeled by the step that made it.
    pub history: Vec<(String, Taxonomy)>,
    /// The reviewed best taxonomy; always the last history entry.
    #[serde(rename = "final")]
    pub final_taxonomy: Taxonomy,
    /// How many update steps displaced the tracked best on the validation
    /// batch.
    pub validation_wins: usize,
}

/// One gateway call as recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub template: String,
    pub attempts: u32,
    /// `"ok"`, `"exhausted"`, or `"error: …"` for calls refused upstream.
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guardrail_failures: Vec<String>,
}

impl ManifestRecord {
    fn from_exchange(exchange: &LlmExchange, outcome: &str) -> Self {
        ManifestRecord {
            template: exchange.template.as_str().to_string(),
            attempts: exchange.attempts,
            outcome: outcome.to_string(),
            guardrail_failures: exchange
                .guardrail_failures
                .iter()
                .map(|f| format!("attempt {}: {}: {}", f.attempt, f.check, f.detail))
                .collect(),
        }
    }
}

/// Tuning knobs for the whole phase. `new` fills the documented defaults.
#[derive(Debug, Clone)]
pub struct Phase1Config {
    /// Use-case instruction rendered into every prompt.
    pub use_case: String,
    /// Advisory summary length in words.
    pub word_target: usize,
    /// Summaries per chain minibatch.
    pub batch_size: usize,
    /// Independently seeded chains to run.
    pub trials: usize,
    /// Votes cast per selection decision (candidate order rotates per run).
    pub selection_runs: usize,
    /// Compare current vs. tracked-best every this many update steps.
    pub eval_every: usize,
    /// Stop a trial once the tracked best survives this many comparisons.
    pub patience: usize,
    /// Smallest subgroup worth its own child taxonomy.
    pub min_subgroup: usize,
    pub seed: u64,
    /// Concurrency for summarization and for independent trials.
    pub max_in_flight: usize,
}

impl Phase1Config {
    pub fn new(use_case: &str, seed: u64) -> Self {
        Phase1Config {
            use_case: use_case.to_string(),
            word_target: 20,
            batch_size: 200,
            trials: 10,
            selection_runs: 4,
            eval_every: 1,
            patience: 3,
            min_subgroup: 50,
            seed,
            max_in_flight: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_case.trim().is_empty() {
            return Err(Error::invalid("use_case must not be empty"));
        }
        for (name, value) in [
            ("word_target", self.word_target),
            ("batch_size", self.batch_size),
            ("trials", self.trials),
            ("selection_runs", self.selection_runs),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("max_in_flight", self.max_in_flight),
        ] {
            if value == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

type Sink = Mutex<Vec<ManifestRecord>>;

/// Runs the summarize → generate/update/review → select pipeline through a
/// guarded [`Gateway`].
pub struct TaxonomyEngine<'a> {
    gateway: &'a Gateway,
    prompts: &'a PromptLibrary,
    config: Phase1Config,
    manifest: Sink,
}

impl<'a> TaxonomyEngine<'a> {
    pub fn new(
        gateway: &'a Gateway,
        prompts: &'a PromptLibrary,
        config: Phase1Config,
    ) -> Result<Self> {
        config.validate()?;
        Ok(TaxonomyEngine {
            gateway,
            prompts,
            config,
            manifest: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &Phase1Config {
        &self.config
    }

    /// Everything the engine has asked the gateway so far, in call order.
    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.manifest.lock().expect("manifest poisoned").clone()
    }

    /// Write the manifest as jsonl, one record per gateway call.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::IoPath {
            path: path.to_path_buf(),
            source: e,
        };
        let mut file = std::fs::File::create(path).map_err(io)?;
        for record in self.manifest.lock().expect("manifest poisoned").iter() {
            let line =
                serde_json::to_string(record).expect("manifest records always serialize");
            file.write_all(line.as_bytes()).map_err(io)?;
            file.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    /// Run one call and log it to `sink` whatever the outcome.
    fn guarded(&self, sink: &Sink, job: &ChatJob) -> Result<LlmExchange> {
        let outcome = self.gateway.complete_with_retry(job);
        let record = match &outcome {
            Ok(exchange) => ManifestRecord::from_exchange(exchange, "ok"),
            Err(Error::Exhausted { exchange }) => ManifestRecord::from_exchange(exchange, "exhausted"),
            Err(e) => ManifestRecord {
                template: job.template.as_str().to_string(),
                attempts: 0,
                outcome: format!("error: {e}"),
                guardrail_failures: Vec::new(),
            },
        };
        sink.lock().expect("manifest poisoned").push(record);
        outcome
    }

    // ---- summarization ----------------------------------------------------

    /// Summarize every document in `sample`. A document whose call exhausts
    /// its retries is dropped with a log entry; anything else survives.
    pub fn summarize_corpus(&self, sample: &CorpusSample) -> Result<Vec<Summary>> {
        if sample.is_empty() {
            return Err(Error::pipeline("summarize", "the corpus sample is empty"));
        }
        let docs: Vec<&Document> = sample.documents.iter().collect();
        self.summarize_docs(&self.manifest, &docs, &self.config.use_case)
    }

    fn summarize_docs(
        &self,
        sink: &Sink,
        docs: &[&Document],
        use_case: &str,
    ) -> Result<Vec<Summary>> {
        let template = self.prompts.get(TemplateName::Summarize);
        let word_target = self.config.word_target.to_string();
        let jobs: Vec<ChatJob> = docs
            .iter()
            .map(|doc| {
                let prompt = template.render(&slots(&[
                    ("use_case", use_case),
                    ("word_target", &word_target),
                    ("text", &doc.text),
                ]))?;
                Ok(ChatJob::new(
                    TemplateName::Summarize,
                    vec![prompt],
                    GenerationSettings::with_base_temperature(SUMMARIZE_TEMPERATURE),
                    GuardrailSpec::new(vec![
                        GuardrailCheck::FormatParse {
                            payload: PayloadKind::FreeText,
                        },
                        GuardrailCheck::OutputLanguage {
                            expected: "en".to_string(),
                        },
                    ]),
                ))
            })
            .collect::<Result<_>>()?;

        let results = self
            .gateway
            .complete_batch(&jobs, self.config.max_in_flight)?;
        let mut summaries = Vec::with_capacity(docs.len());
        let mut dropped = 0usize;
        for (doc, outcome) in docs.iter().zip(results) {
            match outcome {
                Ok(exchange) => {
                    let record = ManifestRecord::from_exchange(&exchange, "ok");
                    sink.lock().expect("manifest poisoned").push(record);
                    let text = exchange
                        .extracted
                        .expect("a passing summarize exchange carries its payload");
                    let words = text.split_whitespace().count();
                    if words > self.config.word_target * WORD_TARGET_SAFETY {
                        log::warn!(
                            "summary of `{}` runs to {words} words (target {})",
                            doc.id,
                            self.config.word_target
                        );
                    }
                    summaries.push(Summary {
                        doc_id: doc.id.clone(),
                        text,
                        language: "en".to_string(),
                    });
                }
                Err(Error::Exhausted { exchange }) => {
                    let record = ManifestRecord::from_exchange(&exchange, "exhausted");
                    sink.lock().expect("manifest poisoned").push(record);
                    dropped += 1;
                    log::warn!("dropping `{}`: summarization exhausted retries", doc.id);
                }
                Err(e) => return Err(e),
            }
        }
        if summaries.is_empty() {
            return Err(Error::pipeline(
                "summarize",
                format!("summarization exhausted retries on all {dropped} documents"),
            ));
        }
        Ok(summaries)
    }

    // ---- the generate / update / review chain ------------------------------

    fn requirements_text(req: &TaxonomyRequirements) -> String {
        format!(
            "about {} labels, never more than {}; names at most {} words",
            req.target_count, req.max_count, req.max_words_per_name
        )
    }

    fn summaries_block(batch: &Minibatch) -> String {
        let lines: Vec<String> = batch
            .summaries
            .iter()
            .map(|s| format!("- {}", s.text))
            .collect();
        lines.join("\n")
    }

    fn taxonomy_guardrails(req: &TaxonomyRequirements) -> GuardrailSpec {
        GuardrailSpec::new(vec![
            GuardrailCheck::FormatParse {
                payload: PayloadKind::TaxonomyTable,
            },
            GuardrailCheck::OutputLanguage {
                expected: "en".to_string(),
            },
            GuardrailCheck::SizeLimit {
                max_labels: req.max_count,
            },
        ])
    }

    /// Parse a chain step's table and soft-check it against `req`; quality
    /// violations are the review step's job, so they only warn here.
    fn parse_step_taxonomy(
        &self,
        extracted: &str,
        req: &TaxonomyRequirements,
        use_case: &str,
        step: &str,
    ) -> Result<Taxonomy> {
        let parsed = taxonomy::from_markdown(extracted, use_case)?;
        for violation in taxonomy::validate(&parsed, req) {
            log::warn!("{step} produced a taxonomy with a violation: {violation:?}");
        }
        Ok(parsed)
    }

    /// Propose an initial taxonomy from the first minibatch. Exhaustion is a
    /// chain error carrying the failed exchange.
    pub fn generate_initial(&self, batch: &Minibatch, req: &TaxonomyRequirements) -> Result<Taxonomy> {
        self.generate_initial_in(&self.manifest, batch, req, &self.config.use_case)
    }

    fn generate_initial_in(
        &self,
        sink: &Sink,
        batch: &Minibatch,
        req: &TaxonomyRequirements,
        use_case: &str,
    ) -> Result<Taxonomy> {
        if batch.summaries.is_empty() {
            return Err(Error::invalid("generate needs a non-empty minibatch"));
        }
        req.validate()?;
        let prompt = self.prompts.get(TemplateName::Generate).render(&slots(&[
            ("use_case", use_case),
            ("target_count", &req.target_count.to_string()),
            ("max_count", &req.max_count.to_string()),
            ("max_words_per_name", &req.max_words_per_name.to_string()),
            ("summaries", &Self::summaries_block(batch)),
        ]))?;
        let job = ChatJob::new(
            TemplateName::Generate,
            vec![prompt],
            GenerationSettings::with_base_temperature(GENERATE_TEMPERATURE),
            Self::taxonomy_guardrails(req),
        );
        let exchange = self.guarded(sink, &job)?;
        let extracted = exchange
            .extracted
            .expect("a passing generate exchange carries its payload");
        self.parse_step_taxonomy(&extracted, req, use_case, "generate")
    }

    /// One SGD-like step: adjust `current` against a new minibatch. If the
    /// call exhausts its retries the batch is skipped and `current` survives.
    pub fn update_taxonomy(
        &self,
        current: &Taxonomy,
        batch: &Minibatch,
        req: &TaxonomyRequirements,
    ) -> Result<Taxonomy> {
        self.update_taxonomy_in(&self.manifest, current, batch, req, &self.config.use_case)
    }

    fn update_taxonomy_in(
        &self,
        sink: &Sink,
        current: &Taxonomy,
        batch: &Minibatch,
        req: &TaxonomyRequirements,
        use_case: &str,
    ) -> Result<Taxonomy> {
        if current.labels.is_empty() {
            return Err(Error::invalid("update needs a non-empty current taxonomy"));
        }
        if batch.summaries.is_empty() {
            return Err(Error::invalid("update needs a non-empty minibatch"));
        }
        let prompt = self.prompts.get(TemplateName::Update).render(&slots(&[
            ("use_case", use_case),
            ("target_count", &req.target_count.to_string()),
            ("max_count", &req.max_count.to_string()),
            ("max_words_per_name", &req.max_words_per_name.to_string()),
            ("current_taxonomy", &taxonomy::to_markdown(current)?),
            ("summaries", &Self::summaries_block(batch)),
        ]))?;
        let job = ChatJob::new(
            TemplateName::Update,
            vec![prompt],
            GenerationSettings::with_base_temperature(UPDATE_TEMPERATURE),
            Self::taxonomy_guardrails(req),
        );
        match self.guarded(sink, &job) {
            Ok(exchange) => {
                let extracted = exchange
                    .extracted
                    .expect("a passing update exchange carries its payload");
                self.parse_step_taxonomy(&extracted, req, use_case, "update")
            }
            Err(Error::Exhausted { .. }) => {
                log::warn!(
                    "update on batch {} exhausted retries; keeping the previous taxonomy",
                    batch.batch_index
                );
                Ok(current.clone())
            }
            Err(e) => Err(e),
        }
    }

    /// Final quality/formatting pass. Falls back to `current` with a warning
    /// if the reviewer exhausts its retries.
    pub fn review_taxonomy(&self, current: &Taxonomy, req: &TaxonomyRequirements) -> Result<Taxonomy> {
        self.review_taxonomy_in(&self.manifest, current, req, &self.config.use_case)
    }

    fn review_taxonomy_in(
        &self,
        sink: &Sink,
        current: &Taxonomy,
        req: &TaxonomyRequirements,
        use_case: &str,
    ) -> Result<Taxonomy> {
        if current.labels.is_empty() {
            return Err(Error::invalid("review needs a non-empty current taxonomy"));
        }
        let prompt = self.prompts.get(TemplateName::Review).render(&slots(&[
            ("use_case", use_case),
            ("target_count", &req.target_count.to_string()),
            ("max_count", &req.max_count.to_string()),
            ("max_words_per_name", &req.max_words_per_name.to_string()),
            ("current_taxonomy", &taxonomy::to_markdown(current)?),
        ]))?;
        let job = ChatJob::new(
            TemplateName::Review,
            vec![prompt],
            GenerationSettings::with_base_temperature(REVIEW_TEMPERATURE),
            Self::taxonomy_guardrails(req),
        );
        match self.guarded(sink, &job) {
            Ok(exchange) => {
                let extracted = exchange
                    .extracted
                    .expect("a passing review exchange carries its payload");
                self.parse_step_taxonomy(&extracted, req, use_case, "review")
            }
            Err(Error::Exhausted { .. }) => {
                log::warn!("review exhausted retries; keeping the unreviewed taxonomy");
                Ok(current.clone())
            }
            Err(e) => Err(e),
        }
    }

    // ---- selection ----------------------------------------------------------

    /// Ask the selection prompt which candidate fits the validation batch
    /// best, `runs` times with the candidate order rotated per run to cancel
    /// position bias. Returns the modal winner's index into `candidates`;
    /// ties break to the lowest index. Fields larger than
    /// [`MAX_SELECTION_GROUP`] run as a tournament.
    pub fn select_taxonomy(
        &self,
        candidates: &[Taxonomy],
        validation_batch: &Minibatch,
        req: &TaxonomyRequirements,
        runs: usize,
    ) -> Result<usize> {
        self.select_in(&self.manifest, candidates, validation_batch, req, runs)
    }

    fn select_in(
        &self,
        sink: &Sink,
        candidates: &[Taxonomy],
        validation_batch: &Minibatch,
        req: &TaxonomyRequirements,
        runs: usize,
    ) -> Result<usize> {
        if candidates.len() < 2 {
            return Err(Error::invalid("selection needs at least 2 candidates"));
        }
        if runs == 0 {
            return Err(Error::invalid("selection needs at least 1 run"));
        }
        let mut pool: Vec<usize> = (0..candidates.len()).collect();
        while pool.len() > 1 {
            let mut winners = Vec::with_capacity(pool.len().div_ceil(MAX_SELECTION_GROUP));
            for group in pool.chunks(MAX_SELECTION_GROUP) {
                if group.len() == 1 {
                    winners.push(group[0]);
                    continue;
                }
                winners.push(self.select_group(sink, candidates, group, validation_batch, req, runs)?);
            }
            pool = winners;
        }
        Ok(pool[0])
    }

    fn select_group(
        &self,
        sink: &Sink,
        candidates: &[Taxonomy],
        group: &[usize],
        validation_batch: &Minibatch,
        req: &TaxonomyRequirements,
        runs: usize,
    ) -> Result<usize> {
        let m = group.len();
        let template = self.prompts.get(TemplateName::Select);
        let requirements = Self::requirements_text(req);
        let summaries = Self::summaries_block(validation_batch);
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        let mut successful = 0usize;
        for run in 0..runs {
            let rotation = run % m;
            let presented: Vec<usize> = (0..m).map(|pos| group[(pos + rotation) % m]).collect();
            let mut blocks = Vec::with_capacity(m);
            for (pos, &original) in presented.iter().enumerate() {
                blocks.push(format!(
                    "<candidate index=\"{}\">\n{}</candidate>",
                    pos + 1,
                    taxonomy::to_markdown(&candidates[original])?
                ));
            }
            let prompt = template.render(&slots(&[
                ("use_case", &self.config.use_case),
                ("requirements", &requirements),
                ("summaries", &summaries),
                ("candidates", &blocks.join("\n")),
            ]))?;
            let job = ChatJob::new(
                TemplateName::Select,
                vec![prompt],
                GenerationSettings::with_base_temperature(SELECT_TEMPERATURE),
                GuardrailSpec::new(vec![GuardrailCheck::FormatParse {
                    payload: PayloadKind::ChoiceIndex { max: m },
                }]),
            );
            match self.guarded(sink, &job) {
                Ok(exchange) => {
                    let extracted = exchange
                        .extracted
                        .expect("a passing select exchange carries its payload");
                    let choice = parse_choice(&extracted, m)?;
                    *votes.entry(presented[choice - 1]).or_insert(0) += 1;
                    successful += 1;
                }
                Err(Error::Exhausted { .. }) => {
                    log::warn!("selection run {run} exhausted retries; vote skipped");
                }
                Err(e) => return Err(e),
            }
        }
        if successful == 0 {
            return Err(Error::pipeline(
                "select",
                format!("all {runs} selection runs exhausted their retries"),
            ));
        }
        // Ascending key order plus strict `>` makes ties land on the lowest
        // original index.
        let mut best = (usize::MAX, 0usize);
        for (&index, &count) in &votes {
            if count > best.1 {
                best = (index, count);
            }
        }
        Ok(best.0)
    }

    // ---- the full phase -----------------------------------------------------

    /// Summarize the train and validation splits, run `trials` independent
    /// chains over the train summaries, and return the trial whose reviewed
    /// taxonomy wins selection on the validation batch.
    pub fn run_phase1(
        &self,
        sample: &CorpusSample,
        req: &TaxonomyRequirements,
    ) -> Result<TaxonomyTrial> {
        req.validate()?;
        let train_docs = sample.in_split(Split::Train);
        let validation_docs = sample.in_split(Split::Validation);
        if train_docs.is_empty() || validation_docs.is_empty() {
            return Err(Error::invalid(
                "phase 1 needs non-empty train and validation splits",
            ));
        }

        let mut docs = train_docs;
        docs.extend(validation_docs);
        let summaries = self.summarize_docs(&self.manifest, &docs, &self.config.use_case)?;
        let mut train_summaries = Vec::new();
        let mut validation_summaries = Vec::new();
        for summary in summaries {
            match sample.split_assignment.get(&summary.doc_id) {
                Some(Split::Train) => train_summaries.push(summary),
                Some(Split::Validation) => validation_summaries.push(summary),
                _ => {}
            }
        }
        if train_summaries.is_empty() {
            return Err(Error::pipeline(
                "phase1",
                "every train document exhausted its summarization retries",
            ));
        }
        if validation_summaries.is_empty() {
            return Err(Error::pipeline(
                "phase1",
                "every validation document exhausted its summarization retries",
            ));
        }
        // The validation batch is capped at one minibatch to bound prompt
        // size; documents keep corpus order, so the cap is deterministic.
        validation_summaries.truncate(self.config.batch_size);
        let validation_batch = Minibatch {
            summaries: validation_summaries,
            epoch: 0,
            batch_index: 0,
        };

        let trial_count = self.config.trials;
        let sinks: Vec<Sink> = (0..trial_count).map(|_| Mutex::new(Vec::new())).collect();
        let results: Vec<Mutex<Option<Result<TaxonomyTrial>>>> =
            (0..trial_count).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(trial_count);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let t = next.fetch_add(1, Ordering::SeqCst);
                    if t >= trial_count {
                        break;
                    }
                    let outcome =
                        self.run_trial(t, &train_summaries, &validation_batch, req, &sinks[t]);
                    *results[t].lock().expect("trial slot poisoned") = Some(outcome);
                });
            }
        });
        // Concurrent trials logged to private sinks; merging in trial order
        // keeps the manifest deterministic.
        {
            let mut manifest = self.manifest.lock().expect("manifest poisoned");
            for sink in sinks {
                manifest.extend(sink.into_inner().expect("manifest poisoned"));
            }
        }

        let mut completed = Vec::with_capacity(trial_count);
        for (t, slot) in results.into_iter().enumerate() {
            match slot.into_inner().expect("trial slot poisoned") {
                Some(Ok(trial)) => completed.push(trial),
                Some(Err(e)) => log::warn!("trial {t} failed: {e}"),
                None => unreachable!("every trial index is visited"),
            }
        }
        if completed.is_empty() {
            return Err(Error::pipeline("phase1", "no trial completed"));
        }
        if completed.len() == 1 {
            return Ok(completed.remove(0));
        }
        let finals: Vec<Taxonomy> = completed
            .iter()
            .map(|t| t.final_taxonomy.clone())
            .collect();
        let winner = self.select_in(
            &self.manifest,
            &finals,
            &validation_batch,
            req,
            self.config.selection_runs,
        )?;
        Ok(completed.swap_remove(winner))
    }

    fn run_trial(
        &self,
        trial_id: usize,
        train: &[Summary],
        validation_batch: &Minibatch,
        req: &TaxonomyRequirements,
        sink: &Sink,
    ) -> Result<TaxonomyTrial> {
        let seed = self.config.seed ^ (trial_id as u64).wrapping_mul(TRIAL_SEED_MIX);
        let mut shuffled = train.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);
        let batches = make_minibatches(&shuffled, self.config.batch_size, 0);

        let mut history = Vec::with_capacity(batches.len() + 1);
        let mut current =
            self.generate_initial_in(sink, &batches[0], req, &self.config.use_case)?;
        history.push(("generate".to_string(), current.clone()));

        let mut best = current.clone();
        let mut validation_wins = 0usize;
        let mut stale_checks = 0usize;
        for (step, batch) in batches.iter().enumerate().skip(1) {
            current = self.update_taxonomy_in(sink, &current, batch, req, &self.config.use_case)?;
            history.push((format!("update {step}"), current.clone()));
            if step % self.config.eval_every != 0 {
                continue;
            }
            if current == best {
                stale_checks += 1;
            } else {
                // A failed comparison shouldn't kill the trial; treat it as
                // the incumbent surviving.
                match self.select_in(
                    sink,
                    &[best.clone(), current.clone()],
                    validation_batch,
                    req,
                    self.config.selection_runs,
                ) {
                    Ok(1) => {
                        best = current.clone();
                        validation_wins += 1;
                        stale_checks = 0;
                    }
                    Ok(_) => stale_checks += 1,
                    Err(e) => {
                        log::warn!("trial {trial_id}: validation check failed ({e}); keeping the incumbent");
                        stale_checks += 1;
                    }
                }
            }
            if stale_checks >= self.config.patience {
                log::info!(
                    "trial {trial_id}: best unchanged for {stale_checks} checks, stopping after batch {step}"
                );
                break;
            }
        }

        let reviewed = self.review_taxonomy_in(sink, &best, req, &self.config.use_case)?;
        history.push(("review".to_string(), reviewed.clone()));
        Ok(TaxonomyTrial {
            trial_id,
            seed,
            history,
            final_taxonomy: reviewed,
            validation_wins,
        })
    }

    // ---- hierarchy ----------------------------------------------------------

    /// Rerun the chain once per parent label over the documents assigned to
    /// it, producing one child taxonomy per sufficiently large subgroup.
    pub fn expand_hierarchy(
        &self,
        tax: &Taxonomy,
        assignments: &[LabelAssignment],
        sample: &CorpusSample,
        req: &TaxonomyRequirements,
    ) -> Result<Vec<Taxonomy>> {
        if assignments.is_empty() {
            log::warn!("expand_hierarchy called with no assignments; nothing to do");
            return Ok(Vec::new());
        }
        let by_id: BTreeMap<&str, &Document> = sample
            .documents
            .iter()
            .map(|d| (d.id.as_str(), d))
            .collect();
        let mut groups: BTreeMap<u32, Vec<&Document>> = BTreeMap::new();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for assignment in assignments {
            let doc = by_id.get(assignment.doc_id.as_str()).ok_or_else(|| {
                Error::invalid(format!(
                    "assignment references unknown document `{}`",
                    assignment.doc_id
                ))
            })?;
            if tax.label_at(assignment.primary_index).is_none() {
                return Err(Error::invalid(format!(
                    "assignment for `{}` uses label index {} not in the taxonomy",
                    assignment.doc_id, assignment.primary_index
                )));
            }
            if !seen.insert(assignment.doc_id.as_str()) {
                log::debug!("duplicate assignment for `{}` ignored", assignment.doc_id);
                continue;
            }
            groups.entry(assignment.primary_index).or_default().push(doc);
        }

        let mut children = Vec::new();
        for label in &tax.labels {
            let Some(docs) = groups.get(&label.index) else {
                continue;
            };
            if docs.len() < self.config.min_subgroup {
                log::info!(
                    "skipping `{}`: subgroup of {} is under the minimum {}",
                    label.name,
                    docs.len(),
                    self.config.min_subgroup
                );
                continue;
            }
            let mut child = self.expand_one(label, docs, req)?;
            child.level = tax.level + 1;
            child.parent_label = Some(label.index);
            children.push(child);
        }
        if children.is_empty() {
            log::warn!(
                "no subgroup reached the minimum size {}; no child taxonomies built",
                self.config.min_subgroup
            );
        }
        Ok(children)
    }

    /// One linear chain over a parent label's subgroup: no trials, no early
    /// stopping — subgroups have no validation split of their own.
    fn expand_one(
        &self,
        parent: &Label,
        docs: &[&Document],
        req: &TaxonomyRequirements,
    ) -> Result<Taxonomy> {
        let use_case = format!(
            "{} (within documents already labeled `{}`: {})",
            self.config.use_case, parent.name, parent.description
        );
        let mut summaries = self.summarize_docs(&self.manifest, docs, &use_case)?;
        let seed = self.config.seed ^ u64::from(parent.index).wrapping_mul(SUBGROUP_SEED_MIX);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        summaries.shuffle(&mut rng);
        let batches = make_minibatches(&summaries, self.config.batch_size, 0);
        let mut current = self.generate_initial_in(&self.manifest, &batches[0], req, &use_case)?;
        for batch in &batches[1..] {
            current = self.update_taxonomy_in(&self.manifest, &current, batch, req, &use_case)?;
        }
        self.review_taxonomy_in(&self.manifest, &current, req, &use_case)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::AssignmentSource;
    use crate::corpus::AsciiHeuristic;
    use crate::gateway::backend::BackendError;
    use crate::gateway::mock::{RuleBackend, ScriptedBackend, TopicRule};
    use crate::gateway::{CompletionRequest, FnBackend};
    use std::sync::Arc;

    fn req(target: usize, max: usize) -> TaxonomyRequirements {
        TaxonomyRequirements {
            use_case: "Cluster customer questions by intent".to_string(),
            target_count: target,
            max_count: max,
            max_words_per_name: 5,
        }
    }

    fn rules() -> Vec<TopicRule> {
        vec![
            TopicRule::new("billing", "Billing", "Charges, invoices, and refunds."),
            TopicRule::new("shipping", "Shipping", "Delivery status and logistics."),
            TopicRule::new("password", "Account Access", "Sign-in and password trouble."),
        ]
    }

    fn config(seed: u64) -> Phase1Config {
        Phase1Config::new("Cluster customer questions by intent", seed)
    }

    fn gateway_with<B: crate::gateway::ChatBackend + 'static>(backend: B) -> Gateway {
        Gateway::new(Arc::new(backend), Arc::new(AsciiHeuristic))
    }

    fn batch_of(texts: &[&str]) -> Minibatch {
        Minibatch {
            summaries: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Summary {
                    doc_id: format!("d{i}"),
                    text: t.to_string(),
                    language: "en".to_string(),
                })
                .collect(),
            epoch: 0,
            batch_index: 0,
        }
    }

    fn labeled_table(names: &[&str]) -> Taxonomy {
        let labels = names
            .iter()
            .enumerate()
            .map(|(i, n)| Label::new(i as u32 + 1, n, "Things of this kind."))
            .collect();
        Taxonomy::new(labels, "Cluster customer questions by intent")
    }

    fn wrapped_table(names: &[&str]) -> String {
        format!(
            "<output>\n{}</output>",
            taxonomy::to_markdown(&labeled_table(names)).unwrap()
        )
    }

    fn sample_with_splits(train: &[(&str, &str)], validation: &[(&str, &str)]) -> CorpusSample {
        let mut documents = Vec::new();
        let mut split_assignment = BTreeMap::new();
        for (id, text) in train {
            documents.push(Document::new(id, text));
            split_assignment.insert(id.to_string(), Split::Train);
        }
        for (id, text) in validation {
            documents.push(Document::new(id, text));
            split_assignment.insert(id.to_string(), Split::Validation);
        }
        CorpusSample {
            documents,
            split_assignment,
            seed: 0,
        }
    }

    #[test]
    fn summarizes_each_document_within_the_word_target() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let sample = CorpusSample::new(vec![
            Document::new("a", "I was billed twice, please refund the billing error"),
            Document::new("b", "Where is my shipping box"),
            Document::new("c", "I forgot my password again"),
        ]);
        let summaries = engine.summarize_corpus(&sample).unwrap();
        assert_eq!(summaries.len(), 3);
        for summary in &summaries {
            assert!(summary.text.split_whitespace().count() <= 20);
            assert_eq!(summary.language, "en");
        }
        assert_eq!(summaries[0].doc_id, "a");
        assert!(summaries[0].text.to_lowercase().contains("billing"));
        assert_eq!(engine.manifest().len(), 3);
    }

    #[test]
    fn a_document_that_exhausts_retries_is_dropped_not_fatal() {
        let backend = FnBackend::new("flaky", |req: &CompletionRequest| {
            if req.prompt().contains("poison-doc") {
                Ok("no tags whatsoever".to_string())
            } else {
                Ok("<output>A clean summary.</output>".to_string())
            }
        });
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let sample = CorpusSample::new(vec![
            Document::new("a", "ordinary text"),
            Document::new("b", "poison-doc text"),
            Document::new("c", "more ordinary text"),
        ]);
        let summaries = engine.summarize_corpus(&sample).unwrap();
        assert_eq!(summaries.len(), 2);
        assert!(summaries.iter().all(|s| s.doc_id != "b"));
        let manifest = engine.manifest();
        assert_eq!(manifest.len(), 3);
        assert_eq!(
            manifest.iter().filter(|r| r.outcome == "exhausted").count(),
            1
        );
    }

    #[test]
    fn an_empty_sample_is_a_stage_error() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let err = engine
            .summarize_corpus(&CorpusSample::new(Vec::new()))
            .unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn an_overlong_summary_is_kept_with_a_warning() {
        let long = "word ".repeat(50);
        let backend = FnBackend::new("verbose", move |_: &CompletionRequest| {
            Ok(format!("<output>{long}</output>"))
        });
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let sample = CorpusSample::new(vec![Document::new("a", "anything")]);
        let summaries = engine.summarize_corpus(&sample).unwrap();
        assert_eq!(summaries.len(), 1);
        assert_eq!(summaries[0].text.split_whitespace().count(), 50);
    }

    #[test]
    fn generate_parses_a_ten_label_table() {
        let names: Vec<String> = (1..=10).map(|i| format!("Topic {i}")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let backend = ScriptedBackend::new().script(TemplateName::Generate, 1, &wrapped_table(&name_refs));
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let tax = engine
            .generate_initial(&batch_of(&["one summary"]), &req(10, 25))
            .unwrap();
        assert_eq!(tax.labels.len(), 10);
        assert_eq!(tax.labels[9].name, "Topic 10");
    }

    #[test]
    fn oversized_generate_output_fails_the_guardrail_then_retries() {
        let big: Vec<String> = (1..=26).map(|i| format!("Topic {i}")).collect();
        let big_refs: Vec<&str> = big.iter().map(String::as_str).collect();
        let ok: Vec<String> = (1..=25).map(|i| format!("Topic {i}")).collect();
        let ok_refs: Vec<&str> = ok.iter().map(String::as_str).collect();
        let backend = ScriptedBackend::new()
            .script(TemplateName::Generate, 1, &wrapped_table(&big_refs))
            .script(TemplateName::Generate, 2, &wrapped_table(&ok_refs));
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let tax = engine
            .generate_initial(&batch_of(&["one summary"]), &req(10, 25))
            .unwrap();
        assert_eq!(tax.labels.len(), 25);
        let manifest = engine.manifest();
        assert_eq!(manifest.len(), 1);
        assert_eq!(manifest[0].attempts, 2);
        assert!(manifest[0].guardrail_failures[0].contains("size_limit"));
    }

    #[test]
    fn prose_generate_output_fails_format_then_retries() {
        let backend = ScriptedBackend::new()
            .script(
                TemplateName::Generate,
                1,
                "<output>here are some thoughts, no table</output>",
            )
            .script(TemplateName::Generate, 2, &wrapped_table(&["Billing"]));
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let tax = engine
            .generate_initial(&batch_of(&["one summary"]), &req(1, 25))
            .unwrap();
        assert_eq!(tax.labels.len(), 1);
        assert!(engine.manifest()[0].guardrail_failures[0].contains("format_parse"));
    }

    #[test]
    fn generate_exhaustion_is_a_chain_error_carrying_the_exchange() {
        let backend = FnBackend::new("broken", |_: &CompletionRequest| {
            Ok("never a table".to_string())
        });
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let err = engine
            .generate_initial(&batch_of(&["one summary"]), &req(1, 25))
            .unwrap_err();
        match err {
            Error::Exhausted { exchange } => {
                assert_eq!(exchange.template, TemplateName::Generate);
                assert_eq!(exchange.attempts, 6);
            }
            other => panic!("expected exhaustion, got {other}"),
        }
        assert_eq!(engine.manifest()[0].outcome, "exhausted");
    }

    #[test]
    fn update_with_an_identity_mock_is_a_fixed_point() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let current = labeled_table(&["Billing", "Shipping"]);
        let updated = engine
            .update_taxonomy(
                &current,
                &batch_of(&["The user asks about billing.", "The user asks about shipping."]),
                &req(2, 25),
            )
            .unwrap();
        assert_eq!(updated.labels, current.labels);
    }

    #[test]
    fn update_can_rename_exactly_one_label() {
        let backend = ScriptedBackend::new().script(
            TemplateName::Update,
            1,
            &wrapped_table(&["Billing", "Delivery"]),
        );
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let current = labeled_table(&["Billing", "Shipping"]);
        let updated = engine
            .update_taxonomy(&current, &batch_of(&["anything"]), &req(2, 25))
            .unwrap();
        let changed: Vec<_> = current
            .labels
            .iter()
            .zip(&updated.labels)
            .filter(|(a, b)| a.name != b.name)
            .collect();
        assert_eq!(changed.len(), 1);
        assert_eq!(changed[0].1.name, "Delivery");
    }

    #[test]
    fn update_exhaustion_falls_back_to_the_current_taxonomy() {
        let backend = FnBackend::new("broken", |_: &CompletionRequest| {
            Ok("<output>still no table</output>".to_string())
        });
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let current = labeled_table(&["Billing", "Shipping"]);
        let updated = engine
            .update_taxonomy(&current, &batch_of(&["anything"]), &req(2, 25))
            .unwrap();
        assert_eq!(updated, current);
        assert_eq!(engine.manifest()[0].outcome, "exhausted");
    }

    #[test]
    fn review_applies_formatting_only_edits() {
        let backend = ScriptedBackend::new().script(
            TemplateName::Review,
            1,
            &wrapped_table(&["Billing Questions", "Shipping Questions"]),
        );
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let current = labeled_table(&["billing questions", "shipping questions"]);
        let reviewed = engine.review_taxonomy(&current, &req(2, 25)).unwrap();
        assert_eq!(reviewed.labels.len(), current.labels.len());
        assert_eq!(reviewed.labels[0].name, "Billing Questions");
    }

    #[test]
    fn review_with_an_identity_mock_returns_the_input() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let current = labeled_table(&["Billing", "Shipping"]);
        let reviewed = engine.review_taxonomy(&current, &req(2, 25)).unwrap();
        assert_eq!(reviewed.labels, current.labels);
    }

    #[test]
    fn review_exhaustion_falls_back_to_the_current_taxonomy() {
        let backend = FnBackend::new("broken", |_: &CompletionRequest| {
            Ok("<output>prose, not a table</output>".to_string())
        });
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let current = labeled_table(&["Billing"]);
        let reviewed = engine.review_taxonomy(&current, &req(1, 25)).unwrap();
        assert_eq!(reviewed, current);
    }

    #[test]
    fn chain_steps_use_their_documented_base_temperatures() {
        let backend = Arc::new(RuleBackend::new(rules()));
        let gateway = Gateway::new(backend.clone(), Arc::new(AsciiHeuristic));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let batch = batch_of(&["The user asks about billing."]);
        let requirements = req(1, 25);
        let tax = engine.generate_initial(&batch, &requirements).unwrap();
        engine.update_taxonomy(&tax, &batch, &requirements).unwrap();
        engine.review_taxonomy(&tax, &requirements).unwrap();
        let temps: Vec<(TemplateName, f64)> = backend
            .calls()
            .iter()
            .map(|c| (c.template, c.temperature))
            .collect();
        assert_eq!(
            temps,
            vec![
                (TemplateName::Generate, GENERATE_TEMPERATURE),
                (TemplateName::Update, UPDATE_TEMPERATURE),
                (TemplateName::Review, REVIEW_TEMPERATURE),
            ]
        );
    }

    #[test]
    fn selecting_between_identical_candidates_breaks_the_tie_to_zero() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let candidate = labeled_table(&["Billing"]);
        let winner = engine
            .select_taxonomy(
                &[candidate.clone(), candidate],
                &batch_of(&["The user asks about billing."]),
                &req(1, 25),
                3,
            )
            .unwrap();
        assert_eq!(winner, 0);
    }

    #[test]
    fn position_bias_is_cancelled_by_the_rotation_schedule() {
        // A rater that always answers "the first candidate listed" splits its
        // four votes 2-2 under rotation, and the tie breaks to index 0.
        let backend = FnBackend::new("first-always", |_: &CompletionRequest| {
            Ok("<output>1</output>".to_string())
        });
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let winner = engine
            .select_taxonomy(
                &[labeled_table(&["Billing"]), labeled_table(&["Shipping"])],
                &batch_of(&["anything"]),
                &req(1, 25),
                4,
            )
            .unwrap();
        assert_eq!(winner, 0);
    }

    #[test]
    fn a_candidate_preferred_in_any_position_wins_unanimously() {
        let backend = FnBackend::new("loves-shipping", |req: &CompletionRequest| {
            let prompt = req.prompt();
            let winner = (1..=5)
                .find(|i| {
                    prompt
                        .split(&format!("<candidate index=\"{i}\">"))
                        .nth(1)
                        .and_then(|rest| rest.split("</candidate>").next())
                        .is_some_and(|body| body.contains("Shipping"))
                })
                .unwrap_or(1);
            Ok(format!("<output>{winner}</output>"))
        });
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let winner = engine
            .select_taxonomy(
                &[labeled_table(&["Billing"]), labeled_table(&["Shipping"])],
                &batch_of(&["anything"]),
                &req(1, 25),
                5,
            )
            .unwrap();
        assert_eq!(winner, 1);
    }

    #[test]
    fn selection_preconditions_are_enforced() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let one = labeled_table(&["Billing"]);
        let batch = batch_of(&["anything"]);
        assert!(engine
            .select_taxonomy(&[one.clone()], &batch, &req(1, 25), 3)
            .is_err());
        assert!(engine
            .select_taxonomy(&[one.clone(), one], &batch, &req(1, 25), 0)
            .is_err());
    }

    #[test]
    fn selection_with_every_run_failing_is_an_error() {
        let backend = FnBackend::new("mute", |_: &CompletionRequest| {
            Err(BackendError::Api("service down".to_string()))
        });
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let err = engine
            .select_taxonomy(
                &[labeled_table(&["Billing"]), labeled_table(&["Shipping"])],
                &batch_of(&["anything"]),
                &req(1, 25),
                2,
            )
            .unwrap_err();
        assert!(err.to_string().contains("selection runs exhausted"));
    }

    #[test]
    fn large_candidate_fields_run_as_a_tournament() {
        let backend = FnBackend::new("loves-billing", |req: &CompletionRequest| {
            let prompt = req.prompt();
            let winner = (1..=MAX_SELECTION_GROUP)
                .find(|i| {
                    prompt
                        .split(&format!("<candidate index=\"{i}\">"))
                        .nth(1)
                        .and_then(|rest| rest.split("</candidate>").next())
                        .is_some_and(|body| body.contains("Billing"))
                })
                .unwrap_or(1);
            Ok(format!("<output>{winner}</output>"))
        });
        let gateway = gateway_with(backend);
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let mut candidates: Vec<Taxonomy> = (0..7)
            .map(|i| labeled_table(&[&format!("Topic {i}")]))
            .collect();
        candidates[5] = labeled_table(&["Billing"]);
        let winner = engine
            .select_taxonomy(&candidates, &batch_of(&["anything"]), &req(1, 25), 2)
            .unwrap();
        assert_eq!(winner, 5);
        // Groups of 5 and 2, then a 2-way final: three groups, two runs each.
        let selects = engine
            .manifest()
            .iter()
            .filter(|r| r.template == "select")
            .count();
        assert_eq!(selects, 6);
    }

    #[test]
    fn phase1_issues_one_generate_then_updates_then_one_review() {
        let backend = Arc::new(RuleBackend::new(rules()));
        let gateway = Gateway::new(backend.clone(), Arc::new(AsciiHeuristic));
        let prompts = PromptLibrary::builtin();
        let mut cfg = config(11);
        cfg.trials = 1;
        cfg.batch_size = 4;
        cfg.eval_every = 10; // keep the validation checks out of this count
        let engine = TaxonomyEngine::new(&gateway, &prompts, cfg).unwrap();
        let train: Vec<(String, String)> = (0..8)
            .map(|i| {
                let topic = ["billing", "shipping", "password"][i % 3];
                (format!("t{i}"), format!("help with {topic} issue {i}"))
            })
            .collect();
        let train_refs: Vec<(&str, &str)> = train
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let sample = sample_with_splits(
            &train_refs,
            &[("v0", "billing question"), ("v1", "shipping question")],
        );
        let trial = engine.run_phase1(&sample, &req(3, 25)).unwrap();

        let mut by_template: BTreeMap<TemplateName, usize> = BTreeMap::new();
        for call in backend.calls() {
            *by_template.entry(call.template).or_insert(0) += 1;
        }
        assert_eq!(by_template.get(&TemplateName::Summarize), Some(&10));
        assert_eq!(by_template.get(&TemplateName::Generate), Some(&1));
        assert_eq!(by_template.get(&TemplateName::Update), Some(&1));
        assert_eq!(by_template.get(&TemplateName::Review), Some(&1));
        assert_eq!(by_template.get(&TemplateName::Select), None);
        assert_eq!(trial.history.len(), 3);
        assert_eq!(trial.history.last().unwrap().1, trial.final_taxonomy);
    }

    #[test]
    fn an_update_that_improves_the_draft_wins_the_validation_check() {
        // One topic per train doc and batch_size 1: whatever the shuffle
        // order, the second batch introduces a new label, so the check runs
        // once and the richer draft wins.
        let backend = Arc::new(RuleBackend::new(rules()));
        let gateway = Gateway::new(backend.clone(), Arc::new(AsciiHeuristic));
        let prompts = PromptLibrary::builtin();
        let mut cfg = config(5);
        cfg.trials = 1;
        cfg.batch_size = 1;
        cfg.selection_runs = 2;
        let engine = TaxonomyEngine::new(&gateway, &prompts, cfg).unwrap();
        let sample = sample_with_splits(
            &[("t0", "a billing problem"), ("t1", "a shipping problem")],
            &[("v0", "billing and shipping questions")],
        );
        let trial = engine.run_phase1(&sample, &req(2, 25)).unwrap();
        assert_eq!(trial.validation_wins, 1);
        assert_eq!(trial.final_taxonomy.labels.len(), 2);
        let selects = backend
            .calls()
            .iter()
            .filter(|c| c.template == TemplateName::Select)
            .count();
        assert_eq!(selects, 2);
    }

    #[test]
    fn a_stale_trial_stops_early() {
        let backend = Arc::new(RuleBackend::new(rules()));
        let gateway = Gateway::new(backend.clone(), Arc::new(AsciiHeuristic));
        let prompts = PromptLibrary::builtin();
        let mut cfg = config(3);
        cfg.trials = 1;
        cfg.batch_size = 1;
        cfg.patience = 1;
        let engine = TaxonomyEngine::new(&gateway, &prompts, cfg).unwrap();
        // Six identical-topic docs: every update is a fixed point, so the
        // first check already exhausts patience=1 and four batches go unused.
        let train: Vec<(String, String)> = (0..6)
            .map(|i| (format!("t{i}"), format!("billing question {i}")))
            .collect();
        let train_refs: Vec<(&str, &str)> = train
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let sample = sample_with_splits(&train_refs, &[("v0", "billing question")]);
        let trial = engine.run_phase1(&sample, &req(1, 25)).unwrap();
        let updates = backend
            .calls()
            .iter()
            .filter(|c| c.template == TemplateName::Update)
            .count();
        assert_eq!(updates, 1);
        assert_eq!(trial.validation_wins, 0);
        assert_eq!(trial.history.len(), 3); // generate, one update, review
    }

    #[test]
    fn phase1_recovers_the_planted_topics() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let mut cfg = config(42);
        cfg.trials = 2;
        cfg.batch_size = 10;
        cfg.selection_runs = 2;
        let engine = TaxonomyEngine::new(&gateway, &prompts, cfg).unwrap();
        let topics = ["billing", "shipping", "password"];
        let train: Vec<(String, String)> = (0..30)
            .map(|i| {
                (
                    format!("t{i}"),
                    format!("customer needs help with {} case {i}", topics[i % 3]),
                )
            })
            .collect();
        let validation: Vec<(String, String)> = (0..6)
            .map(|i| {
                (
                    format!("v{i}"),
                    format!("another {} question", topics[i % 3]),
                )
            })
            .collect();
        let train_refs: Vec<(&str, &str)> =
            train.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let validation_refs: Vec<(&str, &str)> = validation
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let sample = sample_with_splits(&train_refs, &validation_refs);
        let trial = engine.run_phase1(&sample, &req(3, 25)).unwrap();
        let mut names: Vec<&str> = trial
            .final_taxonomy
            .labels
            .iter()
            .map(|l| l.name.as_str())
            .collect();
        names.sort_unstable();
        assert_eq!(names, vec!["Account Access", "Billing", "Shipping"]);
        for (_, tax) in &trial.history {
            assert!(taxonomy::validate(tax, &req(3, 25)).is_empty());
        }
    }

    #[test]
    fn phase1_is_bit_reproducible_with_a_scripted_world() {
        let run = || {
            let gateway = gateway_with(RuleBackend::new(rules()));
            let prompts = PromptLibrary::builtin();
            let mut cfg = config(7);
            cfg.trials = 3;
            cfg.batch_size = 2;
            cfg.selection_runs = 2;
            let engine = TaxonomyEngine::new(&gateway, &prompts, cfg).unwrap();
            let sample = sample_with_splits(
                &[
                    ("t0", "billing billing"),
                    ("t1", "shipping delay"),
                    ("t2", "password reset"),
                    ("t3", "billing refund"),
                ],
                &[("v0", "billing and shipping")],
            );
            let trial = engine.run_phase1(&sample, &req(3, 25)).unwrap();
            (
                serde_json::to_string(&trial).unwrap(),
                serde_json::to_string(&engine.manifest()).unwrap(),
            )
        };
        let (trial_a, manifest_a) = run();
        let (trial_b, manifest_b) = run();
        assert_eq!(trial_a, trial_b);
        assert_eq!(manifest_a, manifest_b);
    }

    #[test]
    fn phase1_requires_both_splits() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let sample = sample_with_splits(&[("t0", "billing")], &[]);
        assert!(engine.run_phase1(&sample, &req(1, 25)).is_err());
    }

    fn assignments_for(
        ids: &[String],
        index: u32,
        name: &str,
    ) -> Vec<LabelAssignment> {
        ids.iter()
            .map(|id| {
                LabelAssignment::new(
                    id,
                    index,
                    name,
                    BTreeSet::new(),
                    AssignmentSource::Llm,
                    "mock",
                )
            })
            .collect()
    }

    #[test]
    fn expansion_builds_one_child_per_qualifying_parent() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let parent = labeled_table(&["Billing", "Shipping"]);
        let billing_ids: Vec<String> = (0..50).map(|i| format!("b{i}")).collect();
        let shipping_ids: Vec<String> = (0..50).map(|i| format!("s{i}")).collect();
        let mut documents: Vec<Document> = billing_ids
            .iter()
            .map(|id| Document::new(id, "billing charge dispute"))
            .collect();
        documents.extend(
            shipping_ids
                .iter()
                .map(|id| Document::new(id, "shipping tracking request")),
        );
        let sample = CorpusSample::new(documents);
        let mut assignments = assignments_for(&billing_ids, 1, "Billing");
        assignments.extend(assignments_for(&shipping_ids, 2, "Shipping"));
        let children = engine
            .expand_hierarchy(&parent, &assignments, &sample, &req(2, 25))
            .unwrap();
        assert_eq!(children.len(), 2);
        for child in &children {
            assert_eq!(child.level, 2);
            assert!(!child.labels.is_empty());
        }
        assert_eq!(children[0].parent_label, Some(1));
        assert_eq!(children[1].parent_label, Some(2));
    }

    #[test]
    fn expansion_skips_subgroups_under_the_minimum() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let parent = labeled_table(&["Billing", "Shipping"]);
        let billing_ids: Vec<String> = (0..50).map(|i| format!("b{i}")).collect();
        let shipping_ids: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        let mut documents: Vec<Document> = billing_ids
            .iter()
            .map(|id| Document::new(id, "billing charge dispute"))
            .collect();
        documents.extend(
            shipping_ids
                .iter()
                .map(|id| Document::new(id, "shipping tracking request")),
        );
        let sample = CorpusSample::new(documents);
        let mut assignments = assignments_for(&billing_ids, 1, "Billing");
        assignments.extend(assignments_for(&shipping_ids, 2, "Shipping"));
        let children = engine
            .expand_hierarchy(&parent, &assignments, &sample, &req(2, 25))
            .unwrap();
        assert_eq!(children.len(), 1);
        assert_eq!(children[0].parent_label, Some(1));
    }

    #[test]
    fn expansion_with_no_assignments_warns_and_returns_nothing() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        let parent = labeled_table(&["Billing"]);
        let children = engine
            .expand_hierarchy(&parent, &[], &CorpusSample::new(Vec::new()), &req(1, 25))
            .unwrap();
        assert!(children.is_empty());
    }

    #[test]
    fn minibatches_are_full_except_the_last() {
        let batch = batch_of(&["a", "b", "c", "d", "e"]);
        let batches = make_minibatches(&batch.summaries, 2, 0);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].summaries.len(), 2);
        assert_eq!(batches[1].summaries.len(), 2);
        assert_eq!(batches[2].summaries.len(), 1);
        assert_eq!(batches[2].batch_index, 2);
    }

    #[test]
    fn the_manifest_round_trips_through_jsonl() {
        let gateway = gateway_with(RuleBackend::new(rules()));
        let prompts = PromptLibrary::builtin();
        let engine = TaxonomyEngine::new(&gateway, &prompts, config(1)).unwrap();
        engine
            .generate_initial(&batch_of(&["The user asks about billing."]), &req(1, 25))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        engine.write_manifest(&path).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        let records: Vec<ManifestRecord> = raw
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records, engine.manifest());
    }

    #[test]
    fn config_validation_rejects_zeroes() {
        let mut cfg = config(1);
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = config(1);
        cfg.use_case = "  ".to_string();
        assert!(cfg.validate().is_err());
    }
}
