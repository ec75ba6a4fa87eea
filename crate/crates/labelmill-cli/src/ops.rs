//! One function per subcommand, plus the shared wiring (corpus loading,
//! backend construction, embedding). Every function validates its input
//! paths before touching any backend, writes only under the configured
//! output directory, and leaves its inputs untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use labelmill::annotate::{AnnotationMode, Annotator, LabelAssignment};
use labelmill::classify::grid::{grid_search_logit, grid_search_mlp, GridSearchResult};
use labelmill::classify::multilabel::{
    train_multilabel, HyperGrid, MultilabelMatrix, MultilabelModel, MultilabelTrials,
};
use labelmill::classify::persist::{load_model, save_model, PersistedModel};
use labelmill::classify::{accuracy, LabeledMatrix};
use labelmill::cluster::{assign_nearest, name_clusters, select_best_run, NamingConfig};
use labelmill::corpus::{
    apply_filters, ingest_dir, ingest_jsonl, sample_subset, split_corpus, AsciiHeuristic,
    CorpusSample, Document, Split,
};
use labelmill::embed::{
    embed_batch, CachedEmbedder, EmbeddedDataset, EmbeddingBackend, HashingEmbedder, HttpEmbedder,
    Normalization,
};
use labelmill::eval::{agreement_report, classification_report, confusion_csv, ReportMode};
use labelmill::gateway::mock::{RuleBackend, ScriptedBackend, TopicRule};
use labelmill::gateway::{ChatBackend, Gateway, HttpChatBackend, PromptLibrary};
use labelmill::induce::{Phase1Config, Summary, TaxonomyEngine};
use labelmill::taxonomy::{self, Taxonomy, TaxonomyRequirements};
use labelmill::{Error, Result};
use serde::Serialize;

use crate::config::{require_file, require_path, RunConfig};
use crate::io::{read_jsonl, write_json, write_jsonl, write_text};

// ------------------------------------------------------------------ wiring

fn load_corpus(config: &RunConfig) -> Result<CorpusSample> {
    let corpus = config.corpus()?;
    require_path(&corpus.path, "corpus path")?;
    let sample = match corpus.format.as_str() {
        "jsonl" => ingest_jsonl(&corpus.path)?,
        "dir" => ingest_dir(&corpus.path)?,
        other => {
            return Err(Error::Config(format!(
                "corpus.format must be jsonl or dir, got `{other}`"
            )))
        }
    };
    let (sample, report) = apply_filters(&sample, &corpus.filters)?;
    if report.retained < report.input {
        log::info!(
            "filters removed {} of {} documents",
            report.input - report.retained,
            report.input
        );
    }
    match corpus.sample_size {
        Some(n) if n < sample.len() => sample_subset(&sample, n, config.seeds.master),
        _ => Ok(sample),
    }
}

/// Loads the corpus and assigns splits. Every command that needs splits goes
/// through here with the same master seed, so taxonomy, annotate, and train
/// all agree on which document is in which split.
fn load_split_corpus(config: &RunConfig) -> Result<CorpusSample> {
    let sample = load_corpus(config)?;
    let s = &config.splits;
    split_corpus(&sample, (s.train, s.validation, s.test), config.seeds.master)
}

fn build_gateway(config: &RunConfig) -> Result<Gateway> {
    let llm = config.llm()?;
    let backend: Arc<dyn ChatBackend> = match llm.backend.as_str() {
        "rule" => {
            if llm.rules.is_empty() {
                return Err(Error::Config(
                    "the rule backend needs at least one [[llm.rules]] entry".to_string(),
                ));
            }
            let rules = llm
                .rules
                .iter()
                .map(|r| TopicRule::new(&r.keyword, &r.name, &r.description))
                .collect();
            Arc::new(RuleBackend::new(rules))
        }
        "script" => {
            let path = llm.script_path.as_ref().ok_or_else(|| {
                Error::Config("the script backend needs llm.script_path".to_string())
            })?;
            require_file(path, "llm script fixture")?;
            Arc::new(ScriptedBackend::from_jsonl_path(path)?)
        }
        "http" => {
            let endpoint = llm.endpoint.as_deref().ok_or_else(|| {
                Error::Config("the http backend needs llm.endpoint".to_string())
            })?;
            let model = llm.model.as_deref().ok_or_else(|| {
                Error::Config("the http backend needs llm.model".to_string())
            })?;
            Arc::new(HttpChatBackend::new(endpoint, model)?)
        }
        other => return Err(Error::Config(format!("unknown llm backend `{other}`"))),
    };
    Ok(Gateway::new(backend, Arc::new(AsciiHeuristic)))
}

fn build_embedder(config: &RunConfig) -> Result<Box<dyn EmbeddingBackend>> {
    let embedding = config.embedding()?;
    let seed = embedding.seed.unwrap_or(config.seeds.master);
    let inner: Box<dyn EmbeddingBackend> = match embedding.provider.as_str() {
        "hashing" => Box::new(HashingEmbedder::new(embedding.dim, seed)?),
        "http" => {
            let endpoint = embedding.endpoint.as_deref().ok_or_else(|| {
                Error::Config("the http embedding provider needs embedding.endpoint".to_string())
            })?;
            let model = embedding.model.as_deref().ok_or_else(|| {
                Error::Config("the http embedding provider needs embedding.model".to_string())
            })?;
            Box::new(HttpEmbedder::new(
                endpoint,
                model,
                embedding.dim,
                embedding.max_retries,
            )?)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown embedding provider `{other}`"
            )))
        }
    };
    match &embedding.cache_dir {
        Some(dir) => Ok(Box::new(CachedEmbedder::new(inner, dir)?)),
        None => Ok(inner),
    }
}

fn normalization(config: &RunConfig) -> Result<Normalization> {
    Ok(match config.embedding()?.normalization.as_str() {
        "none" => Normalization::None,
        _ => Normalization::L2,
    })
}

/// Embeds the given documents' text; failed documents are dropped with a
/// warning so one bad row cannot sink a whole run.
fn embed_documents(config: &RunConfig, docs: &[&Document]) -> Result<EmbeddedDataset> {
    let backend = build_embedder(config)?;
    let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let outcome = embed_batch(&ids, &texts, backend.as_ref(), normalization(config)?)?;
    for failure in &outcome.failures {
        log::warn!("embedding failed for `{}`: {}", failure.doc_id, failure.reason);
    }
    if outcome.dataset.is_empty() {
        return Err(Error::pipeline("embed", "no document could be embedded"));
    }
    Ok(outcome.dataset)
}

fn requirements(config: &RunConfig) -> Result<TaxonomyRequirements> {
    let req = TaxonomyRequirements {
        use_case: config.use_case()?.to_string(),
        target_count: config.requirements.target_count,
        max_count: config.requirements.max_count,
        max_words_per_name: config.requirements.max_words_per_name,
    };
    req.validate()?;
    Ok(req)
}

fn load_taxonomy(config: &RunConfig, path: &PathBuf) -> Result<Taxonomy> {
    require_file(path, "taxonomy file")?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::IoPath {
        path: path.clone(),
        source: e,
    })?;
    let use_case = config.use_case.as_deref().unwrap_or("");
    taxonomy::from_markdown(&text, use_case)
}

// ---------------------------------------------------------------- commands

/// `summarize`: one LLM summary per retained corpus document.
pub fn cmd_summarize(config: &RunConfig) -> Result<()> {
    let sample = load_corpus(config)?;
    requirements(config)?; // use_case checked before any LLM call
    let gateway = build_gateway(config)?;
    let prompts = PromptLibrary::builtin();
    let engine = TaxonomyEngine::new(&gateway, &prompts, phase1_config(config)?)?;

    let summaries = engine.summarize_corpus(&sample)?;
    write_jsonl(&config.out_path("summaries.jsonl"), &summaries)?;
    engine.write_manifest(&config.out_path("summarize_manifest.jsonl"))?;
    println!(
        "summarized {} of {} documents -> {}",
        summaries.len(),
        sample.len(),
        config.out_path("summaries.jsonl").display()
    );
    Ok(())
}

fn phase1_config(config: &RunConfig) -> Result<Phase1Config> {
    let knobs = &config.phase1;
    let mut p1 = Phase1Config::new(config.use_case()?, config.seeds.master);
    p1.word_target = knobs.word_target;
    p1.batch_size = knobs.batch_size;
    p1.trials = knobs.trials;
    p1.selection_runs = knobs.selection_runs;
    p1.eval_every = knobs.eval_every;
    p1.patience = knobs.patience;
    p1.min_subgroup = knobs.min_subgroup;
    p1.max_in_flight = knobs.max_in_flight;
    p1.validate()?;
    Ok(p1)
}

#[derive(Serialize)]
struct TaxonomyReport<'a> {
    winning_trial: usize,
    trial_seed: u64,
    validation_wins: usize,
    steps: Vec<&'a str>,
    labels: usize,
    violations: Vec<String>,
}

/// `taxonomy`: the full generate/update/review loop over seeded trials.
pub fn cmd_taxonomy(config: &RunConfig) -> Result<()> {
    let sample = load_split_corpus(config)?;
    let req = requirements(config)?;
    let gateway = build_gateway(config)?;
    let prompts = PromptLibrary::builtin();
    let engine = TaxonomyEngine::new(&gateway, &prompts, phase1_config(config)?)?;

    let trial = engine.run_phase1(&sample, &req)?;
    let violations: Vec<String> = taxonomy::validate(&trial.final_taxonomy, &req)
        .iter()
        .map(|v| v.to_string())
        .collect();
    for v in &violations {
        log::warn!("requirement violation in winning taxonomy: {v}");
    }

    write_text(
        &config.out_path("taxonomy.md"),
        &taxonomy::to_markdown(&trial.final_taxonomy)?,
    )?;
    engine.write_manifest(&config.out_path("taxonomy_manifest.jsonl"))?;
    let report = TaxonomyReport {
        winning_trial: trial.trial_id,
        trial_seed: trial.seed,
        validation_wins: trial.validation_wins,
        steps: trial.history.iter().map(|(step, _)| step.as_str()).collect(),
        labels: trial.final_taxonomy.labels.len(),
        violations,
    };
    write_json(&config.out_path("taxonomy_report.json"), &report)?;
    println!(
        "taxonomy with {} labels -> {}",
        trial.final_taxonomy.labels.len(),
        config.out_path("taxonomy.md").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CoverageReport {
    coverage: f64,
    documents: usize,
    flagged: usize,
}

/// `annotate`: pseudo-label every document against an existing taxonomy.
pub fn cmd_annotate(config: &RunConfig) -> Result<()> {
    let taxonomy_path = config.input_path(&config.annotate.taxonomy, "taxonomy.md");
    let tax = load_taxonomy(config, &taxonomy_path)?;
    if tax.labels.is_empty() {
        return Err(Error::invalid(format!(
            "taxonomy `{}` has no labels",
            taxonomy_path.display()
        )));
    }
    let mode = match config.annotate.mode.as_deref() {
        None | Some("primary_and_all") => AnnotationMode::PrimaryAndAll,
        Some("primary_only") => AnnotationMode::PrimaryOnly,
        Some(other) => {
            return Err(Error::Config(format!(
                "annotate.mode must be primary_only or primary_and_all, got `{other}`"
            )))
        }
    };
    let sample = load_split_corpus(config)?;
    config.use_case()?;
    let gateway = build_gateway(config)?;
    let prompts = PromptLibrary::builtin();
    let annotator = Annotator::new(&gateway, &prompts);

    let dataset = annotator.annotate(&sample, &tax, mode)?;
    let coverage = labelmill::annotate::coverage(&dataset)?;
    let flagged = dataset
        .assignments
        .iter()
        .filter(|a| !a.flags.is_empty())
        .count();

    write_jsonl(&config.out_path("assignments.jsonl"), &dataset.assignments)?;
    write_json(
        &config.out_path("coverage.json"),
        &CoverageReport {
            coverage,
            documents: dataset.assignments.len(),
            flagged,
        },
    )?;
    println!(
        "annotated {} documents, coverage {:.4} -> {}",
        dataset.assignments.len(),
        coverage,
        config.out_path("assignments.jsonl").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    model: String,
    train_items: usize,
    validation_items: usize,
    test_items: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<GridSearchResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_label_grid: Option<MultilabelTrials>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_exact_match: Option<f64>,
}

/// `train`: distill the annotations into an embedding classifier.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let assignments_path = config.input_path(&config.train.assignments, "assignments.jsonl");
    require_file(&assignments_path, "assignments file")?;
    let assignments: Vec<LabelAssignment> = read_jsonl(&assignments_path)?;
    if assignments.is_empty() {
        return Err(Error::invalid(format!(
            "assignments file `{}` is empty",
            assignments_path.display()
        )));
    }
    let sample = load_split_corpus(config)?;
    let by_id: BTreeMap<&str, &LabelAssignment> = assignments
        .iter()
        .map(|a| (a.doc_id.as_str(), a))
        .collect();

    // Embed once over every assigned document, then slice per split.
    let docs: Vec<&Document> = sample
        .documents
        .iter()
        .filter(|d| by_id.contains_key(d.id.as_str()))
        .collect();
    if docs.is_empty() {
        return Err(Error::invalid(
            "no assignment matches any corpus document; \
             were the annotations produced from this corpus?",
        ));
    }
    let embedded = embed_documents(config, &docs)?;
    let split_ids = |split: Split| -> Vec<String> {
        sample
            .in_split(split)
            .iter()
            .filter(|d| by_id.contains_key(d.id.as_str()))
            .filter(|d| embedded.doc_ids.contains(&d.id))
            .map(|d| d.id.clone())
            .collect()
    };
    let train_ids = split_ids(Split::Train);
    let validation_ids = split_ids(Split::Validation);
    let test_ids = split_ids(Split::Test);
    if train_ids.is_empty() || validation_ids.is_empty() {
        return Err(Error::invalid(
            "training needs non-empty train and validation splits with assignments",
        ));
    }

    let kind = config.train.model.as_str();
    let seed = config.seeds.master;
    let model_path = config.out_path("model.bin");
    let report = match kind {
        "logit" | "mlp" => {
            let matrix = |ids: &[String]| -> Result<LabeledMatrix> {
                let subset = embedded.subset_by_ids(ids)?;
                let assigned: Vec<LabelAssignment> = ids
                    .iter()
                    .map(|id| (*by_id[id.as_str()]).clone())
                    .collect();
                LabeledMatrix::from_assignments(&subset, &assigned)
            };
            let train_m = matrix(&train_ids)?;
            let validation_m = matrix(&validation_ids)?;
            let (grid, model) = match kind {
                "logit" => {
                    grid_search_logit(&train_m, &validation_m, &config.train.lambdas, seed)?
                }
                _ => grid_search_mlp(&train_m, &validation_m, &config.train.hidden, seed)?,
            };
            let test_accuracy = if test_ids.is_empty() {
                None
            } else {
                Some(accuracy(&model, &matrix(&test_ids)?)?)
            };
            save_model(&model_path, &PersistedModel::Multiclass(model))?;
            TrainReport {
                model: kind.to_string(),
                train_items: train_ids.len(),
                validation_items: validation_ids.len(),
                test_items: test_ids.len(),
                validation_accuracy: Some(grid.best_accuracy),
                grid: Some(grid),
                test_accuracy,
                per_label_grid: None,
                test_exact_match: None,
            }
        }
        "multilabel-logit" | "multilabel-mlp" => {
            let taxonomy_path = config.input_path(&config.train.taxonomy, "taxonomy.md");
            let tax = load_taxonomy(config, &taxonomy_path)?;
            let matrix = |ids: &[String]| -> Result<MultilabelMatrix> {
                let subset = embedded.subset_by_ids(ids)?;
                let assigned: Vec<LabelAssignment> = ids
                    .iter()
                    .map(|id| (*by_id[id.as_str()]).clone())
                    .collect();
                MultilabelMatrix::from_assignments(&subset, &assigned, &tax, false)
            };
            let train_m = matrix(&train_ids)?;
            let validation_m = matrix(&validation_ids)?;
            let grid = match kind {
                "multilabel-logit" => HyperGrid::Lambdas(config.train.lambdas.clone()),
                _ => HyperGrid::Hidden(config.train.hidden.clone()),
            };
            let (model, trials) = train_multilabel(&train_m, Some(&validation_m), &grid, seed)?;
            let test_exact_match = if test_ids.is_empty() {
                None
            } else {
                Some(exact_match(&model, &matrix(&test_ids)?)?)
            };
            save_model(&model_path, &PersistedModel::Multilabel(model))?;
            TrainReport {
                model: kind.to_string(),
                train_items: train_ids.len(),
                validation_items: validation_ids.len(),
                test_items: test_ids.len(),
                grid: None,
                validation_accuracy: None,
                test_accuracy: None,
                per_label_grid: Some(trials),
                test_exact_match,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "train.model must be logit, mlp, multilabel-logit, or multilabel-mlp, got `{other}`"
            )))
        }
    };

    write_json(&config.out_path("train_report.json"), &report)?;
    println!(
        "trained {} -> {} (report {})",
        kind,
        model_path.display(),
        config.out_path("train_report.json").display()
    );
    Ok(())
}

/// Fraction of rows whose predicted label set equals the target set.
fn exact_match(model: &MultilabelModel, data: &MultilabelMatrix) -> Result<f64> {
    if data.rows.is_empty() {
        return Err(Error::invalid("no rows to score"));
    }
    let mut hits = 0usize;
    for (row, target) in data.rows.iter().zip(&data.targets) {
        if &model.predict(row)? == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.rows.len() as f64)
}

#[derive(Serialize)]
struct PredictionRecord {
    doc_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_index: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_indices: Option<BTreeSet<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cluster: Option<usize>,
}

impl PredictionRecord {
    fn empty(doc_id: &str) -> Self {
        PredictionRecord {
            doc_id: doc_id.to_string(),
            label_index: None,
            label_name: None,
            confidence: None,
            label_indices: None,
            cluster: None,
        }
    }
}

/// `predict`: label the corpus with a previously trained model file.
pub fn cmd_predict(config: &RunConfig) -> Result<()> {
    let model_path = config.input_path(&config.predict.model_path, "model.bin");
    require_file(&model_path, "model file")?;
    let names: Option<Taxonomy> = match &config.predict.taxonomy {
        Some(path) => Some(load_taxonomy(config, path)?),
        None => None,
    };
    let sample = load_corpus(config)?;
    let docs: Vec<&Document> = sample.documents.iter().collect();
    let embedded = embed_documents(config, &docs)?;
    let model = load_model(&model_path)?;

    let name_of = |index: u32| -> Option<String> {
        names
            .as_ref()
            .and_then(|t| t.label_at(index))
            .map(|l| l.name.clone())
    };
    let mut records = Vec::with_capacity(embedded.len());
    for (i, doc_id) in embedded.doc_ids.iter().enumerate() {
        let row = embedded.row(i);
        let mut record = PredictionRecord::empty(doc_id);
        match &model {
            PersistedModel::Multiclass(m) => {
                let (label, scores) = m.predict(row)?;
                record.label_index = Some(label);
                record.label_name = name_of(label);
                record.confidence = scores.iter().cloned().fold(None, |best, s| {
                    Some(best.map_or(s, |b: f64| b.max(s)))
                });
            }
            PersistedModel::Multilabel(m) => {
                record.label_indices = Some(m.predict(row)?);
            }
            PersistedModel::Kmeans(m) => {
                record.cluster = Some(assign_nearest(&m.centroids, &[row.to_vec()])[0]);
            }
        }
        records.push(record);
    }

    write_jsonl(&config.out_path("predictions.jsonl"), &records)?;
    println!(
        "predicted {} documents -> {}",
        records.len(),
        config.out_path("predictions.jsonl").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ClusterReport {
    k: usize,
    best_seed: u64,
    validation_silhouette: f64,
    inertia: f64,
    trials: Vec<labelmill::cluster::TrialOutcome>,
    fallback_clusters: Vec<usize>,
}

/// `cluster-baseline`: embed, cluster with seeded restarts, name clusters.
pub fn cmd_cluster_baseline(config: &RunConfig) -> Result<()> {
    let summaries: BTreeMap<String, String> = match &config.cluster.summaries {
        Some(path) => {
            require_file(path, "summaries file")?;
            read_jsonl::<Summary>(path)?
                .into_iter()
                .map(|s| (s.doc_id, s.text))
                .collect()
        }
        None => BTreeMap::new(),
    };
    let use_case = config.use_case()?.to_string();
    let sample = load_split_corpus(config)?;
    let gateway = build_gateway(config)?;
    let prompts = PromptLibrary::builtin();

    let train_docs = sample.in_split(Split::Train);
    let validation_docs = sample.in_split(Split::Validation);
    if train_docs.is_empty() || validation_docs.is_empty() {
        return Err(Error::invalid(
            "clustering needs non-empty train and validation splits",
        ));
    }
    let train = embed_documents(config, &train_docs)?;
    let validation = embed_documents(config, &validation_docs)?;

    let seeds: Vec<u64> = if config.cluster.trial_seeds.is_empty() {
        (0..config.cluster.trials as u64)
            .map(|i| config.seeds.master.wrapping_add(i))
            .collect()
    } else {
        config.cluster.trial_seeds.clone()
    };
    let best = select_best_run(
        &train.matrix,
        &validation.matrix,
        config.cluster.k,
        &seeds,
        config.cluster.batch_size,
        config.cluster.max_iters,
    )?;

    let mut naming = NamingConfig::new(&use_case, config.seeds.master);
    naming.per_cluster_n = config.cluster.per_cluster_n;
    let named = name_clusters(
        &gateway,
        &prompts,
        &best.model,
        &train.doc_ids,
        &sample,
        &summaries,
        &naming,
    )?;

    write_text(
        &config.out_path("cluster_taxonomy.md"),
        &taxonomy::to_markdown(&named.taxonomy)?,
    )?;
    let report = ClusterReport {
        k: config.cluster.k,
        best_seed: best.model.seed,
        validation_silhouette: best.validation_silhouette,
        inertia: best.model.inertia,
        trials: best.trials,
        fallback_clusters: named.fallback_clusters,
    };
    write_json(&config.out_path("cluster_report.json"), &report)?;
    save_model(
        &config.out_path("cluster_model.bin"),
        &PersistedModel::Kmeans(best.model),
    )?;
    println!(
        "clustered k={} silhouette {:.4} -> {}",
        config.cluster.k,
        report.validation_silhouette,
        config.out_path("cluster_taxonomy.md").display()
    );
    Ok(())
}

/// `evaluate`: classification metrics for gold vs pred files, agreement
/// statistics for rater files, or both.
pub fn cmd_evaluate(config: &RunConfig) -> Result<()> {
    let eval = &config.evaluate;
    let have_pair = eval.gold.is_some() || eval.pred.is_some();
    if !have_pair && eval.raters.is_empty() {
        return Err(Error::Config(
            "evaluate needs [evaluate].gold and [evaluate].pred, or [evaluate].raters".to_string(),
        ));
    }

    if have_pair {
        let gold_path = eval.gold.as_ref().ok_or_else(|| {
            Error::Config("evaluate.pred is set but evaluate.gold is missing".to_string())
        })?;
        let pred_path = eval.pred.as_ref().ok_or_else(|| {
            Error::Config("evaluate.gold is set but evaluate.pred is missing".to_string())
        })?;
        require_file(gold_path, "gold assignments")?;
        require_file(pred_path, "predicted assignments")?;
        let gold: Vec<LabelAssignment> = read_jsonl(gold_path)?;
        let pred: Vec<LabelAssignment> = read_jsonl(pred_path)?;

        let primary = classification_report(&gold, &pred, ReportMode::Primary)?;
        let all_labels = classification_report(&gold, &pred, ReportMode::AllLabels)?;
        let by_language = language_breakdown(config, &gold, &pred)?;

        let mut payload = serde_json::Map::new();
        payload.insert("primary".to_string(), serde_json::to_value(&primary).unwrap());
        payload.insert(
            "all_labels".to_string(),
            serde_json::to_value(&all_labels).unwrap(),
        );
        if let Some(by_language) = by_language {
            payload.insert("by_language".to_string(), by_language);
        }
        write_json(&config.out_path("classification.json"), &payload)?;
        write_text(&config.out_path("confusion.csv"), &confusion_csv(&primary))?;
        println!(
            "classification report -> {}",
            config.out_path("classification.json").display()
        );
    }

    if !eval.raters.is_empty() {
        let mut by_rater: BTreeMap<String, Vec<LabelAssignment>> = BTreeMap::new();
        for path in &eval.raters {
            require_file(path, "rater assignments")?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            if by_rater
                .insert(stem.clone(), read_jsonl(path)?)
                .is_some()
            {
                return Err(Error::Config(format!(
                    "two rater files share the stem `{stem}`"
                )));
            }
        }
        let report = agreement_report(&by_rater)?;
        write_json(&config.out_path("agreement.json"), &report)?;
        println!(
            "agreement over {} raters -> {}",
            report.n_raters,
            config.out_path("agreement.json").display()
        );
    }
    Ok(())
}

/// Per-language primary reports, present only when the corpus is configured
/// and carries language tags.
fn language_breakdown(
    config: &RunConfig,
    gold: &[LabelAssignment],
    pred: &[LabelAssignment],
) -> Result<Option<serde_json::Value>> {
    if config.corpus.is_none() {
        return Ok(None);
    }
    let sample = load_corpus(config)?;
    let mut language_of: BTreeMap<&str, &str> = BTreeMap::new();
    for doc in &sample.documents {
        if let Some(language) = &doc.language {
            language_of.insert(&doc.id, language);
        }
    }
    if language_of.is_empty() {
        return Ok(None);
    }

    let pred_by_id: BTreeMap<&str, &LabelAssignment> =
        pred.iter().map(|a| (a.doc_id.as_str(), a)).collect();
    let mut groups: BTreeMap<&str, (Vec<LabelAssignment>, Vec<LabelAssignment>)> = BTreeMap::new();
    for g in gold {
        let Some(&language) = language_of.get(g.doc_id.as_str()) else {
            continue;
        };
        let Some(&p) = pred_by_id.get(g.doc_id.as_str()) else {
            continue;
        };
        let entry = groups.entry(language).or_default();
        entry.0.push(g.clone());
        entry.1.push(p.clone());
    }

    let mut out = serde_json::Map::new();
    for (language, (g, p)) in &groups {
        let report = classification_report(g, p, ReportMode::Primary)?;
        out.insert(
            language.to_string(),
            serde_json::to_value(&report)
                .map_err(|e| Error::Payload(format!("encoding language breakdown: {e}")))?,
        );
    }
    if out.is_empty() {
        return Ok(None);
    }
    Ok(Some(serde_json::Value::Object(out)))
}
