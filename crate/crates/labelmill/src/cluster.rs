//! Embedding-space clustering baseline: minibatch k-means with k-means++
//! initialization, silhouette-scored run selection, and LLM-generated cluster
//! names, producing a taxonomy shaped exactly like the LLM-driven one.
//!
//! Distances are Euclidean; on l2-normalized embeddings that ordering is
//! monotone in cosine similarity. Minibatch updates alone do not guarantee
//! monotone progress, so each epoch ends with a full-pass inertia evaluation
//! and the best centroids seen are the ones kept — the reported per-epoch
//! inertia sequence is non-increasing by construction.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::CorpusSample;
use crate::error::{Error, Result};
use crate::gateway::{
    ChatJob, Gateway, GenerationSettings, GuardrailCheck, GuardrailSpec, PayloadKind,
    PromptLibrary, TemplateName,
};
use crate::taxonomy::{Label, Taxonomy};

/// A fitted k-means model over one embedded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Per-row cluster index, aligned with the rows the model was fitted on.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each row to its assigned centroid.
    pub inertia: f64,
    pub seed: u64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.is_empty() {
            return Err(Error::invalid("cluster model has no centroids"));
        }
        let dim = self.centroids[0].len();
        if dim == 0 || self.centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid("ragged centroid matrix"));
        }
        if self.centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite centroid"));
        }
        if self.assignments.iter().any(|&a| a >= self.k()) {
            return Err(Error::invalid("assignment to a missing cluster"));
        }
        if !self.inertia.is_finite() || self.inertia < 0.0 {
            return Err(Error::invalid("inertia must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-point silhouette values in [-1, 1] and their arithmetic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteScore {
    pub per_point: Vec<f64>,
    pub mean: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = sq_dist(&centroids[0], x);
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(centroid, x);
        // Strict improvement only: ties stay with the lowest cluster index.
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Nearest-centroid assignment for every row.
pub fn assign_nearest(centroids: &[Vec<f64>], rows: &[Vec<f64>]) -> Vec<usize> {
    rows.iter().map(|x| nearest(centroids, x)).collect()
}

fn total_inertia(centroids: &[Vec<f64>], rows: &[Vec<f64>], assignments: &[usize]) -> f64 {
    rows.iter()
        .zip(assignments)
        .map(|(x, &a)| sq_dist(&centroids[a], x))
        .sum()
}

fn validate_rows(rows: &[Vec<f64>]) -> Result<usize> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot cluster an empty dataset"));
    }
    let dim = rows[0].len();
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("ragged or zero-width rows"));
    }
    Ok(dim)
}

fn kmeanspp_with_rng(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(rows[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = rows.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // Every point coincides with a centroid; fall back to uniform.
            rng.random_range(0..n)
        } else {
            let r: f64 = rng.random_range(0.0..total);
            let mut cum = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                cum += w;
                if r < cum {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(rows[pick].clone());
        let last = centroids.last().unwrap();
        for (slot, x) in d2.iter_mut().zip(rows) {
            *slot = slot.min(sq_dist(x, last));
        }
    }
    centroids
}

/// k-means++ seeding: first centroid uniform, each next drawn with
/// probability proportional to its squared distance to the nearest chosen one.
pub fn kmeanspp_init(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    validate_rows(rows)?;
    if k == 0 || k > rows.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be between 1 and the {} data points",
            rows.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(kmeanspp_with_rng(rows, k, &mut rng))
}

/// Fits minibatch k-means and returns the per-epoch best-so-far full-pass
/// inertia alongside the model; the trace is non-increasing.
pub fn fit_minibatch_kmeans_with_trace(
    rows: &[Vec<f64>],
    k: usize,
    batch_size: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(ClusterModel, Vec<f64>)> {
    validate_rows(rows)?;
    let n = rows.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "k = {k} must be between 1 and the {n} data points"
        )));
    }
    if batch_size == 0 || max_iters == 0 {
        return Err(Error::invalid("batch size and iteration budget must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_with_rng(rows, k, &mut rng);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut trace = Vec::with_capacity(max_iters);

    for _ in 0..max_iters {
        order.shuffle(&mut rng);
        // Counts reset each epoch, so one epoch at batch_size ≥ n is exactly
        // a Lloyd iteration: assign against epoch-start centroids, then each
        // centroid becomes the running mean of its batch members.
        let mut counts = vec![0usize; k];
        for batch in order.chunks(batch_size) {
            let assigned: Vec<(usize, usize)> =
                batch.iter().map(|&i| (i, nearest(&centroids, &rows[i]))).collect();
            for (i, c) in assigned {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                for (slot, x) in centroids[c].iter_mut().zip(&rows[i]) {
                    *slot += eta * (x - *slot);
                }
            }
        }
        let assignments = assign_nearest(&centroids, rows);
        let inertia = total_inertia(&centroids, rows, &assignments);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, centroids.clone()));
        }
        trace.push(best.as_ref().unwrap().0);
    }

    let (_, mut centroids) = best.unwrap();
    let mut assignments = assign_nearest(&centroids, rows);

    // Final-pass repair: an empty cluster steals the point farthest from its
    // assigned centroid. Reassignment may empty another cluster, so repeat at
    // most k times, stopping if the picture no longer changes.
    for _ in 0..k {
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        let farthest = (0..n)
            .max_by(|&i, &j| {
                let di = sq_dist(&centroids[assignments[i]], &rows[i]);
                let dj = sq_dist(&centroids[assignments[j]], &rows[j]);
                di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
            })
            .unwrap();
        log::warn!("cluster {empty} is empty; re-seeding it from point {farthest}");
        centroids[empty] = rows[farthest].clone();
        let repaired = assign_nearest(&centroids, rows);
        if repaired == assignments {
            log::warn!("re-seeding cluster {empty} changed no assignments; giving up");
            break;
        }
        assignments = repaired;
    }

    let inertia = total_inertia(&centroids, rows, &assignments);
    let model = ClusterModel {
        centroids,
        assignments,
        inertia,
        seed,
    };
    model.validate()?;
    Ok((model, trace))
}

/// Minibatch k-means; see [`fit_minibatch_kmeans_with_trace`].
pub fn fit_minibatch_kmeans(
    rows: &[Vec<f64>],
    k: usize,
    batch_size: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterModel> {
    fit_minibatch_kmeans_with_trace(rows, k, batch_size, seed, max_iters).map(|(m, _)| m)
}

/// Silhouette coefficient: s = (b - a) / max(a, b), with a the mean
/// intra-cluster distance (excluding self) and b the smallest mean distance
/// to another cluster. Singletons score 0, as does the a = b = 0 degeneracy.
pub fn silhouette(rows: &[Vec<f64>], assignments: &[usize]) -> Result<SilhouetteScore> {
    validate_rows(rows)?;
    if assignments.len() != rows.len() {
        return Err(Error::invalid("assignment count differs from row count"));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assignments.iter().enumerate() {
        members.entry(a).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::invalid("silhouette needs at least 2 clusters"));
    }

    let dist = |i: usize, j: usize| sq_dist(&rows[i], &rows[j]).sqrt();
    let mut per_point = Vec::with_capacity(rows.len());
    for i in 0..rows.len() {
        let own = &members[&assignments[i]];
        if own.len() == 1 {
            per_point.push(0.0);
            continue;
        }
        let a = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(i, j))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(&c, _)| c != assignments[i])
            .map(|(_, other)| other.iter().map(|&j| dist(i, j)).sum::<f64>() / other.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let s = if a == 0.0 && b == 0.0 {
            0.0
        } else {
            (b - a) / a.max(b)
        };
        per_point.push(s);
    }
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(SilhouetteScore { per_point, mean })
}

/// The winning trial of [`select_best_run`].
#[derive(Debug, Clone)]
pub struct BestRun {
    pub model: ClusterModel,
    /// Mean silhouette of the validation rows under nearest-centroid
    /// assignment to the winning model's centroids.
    pub validation_silhouette: f64,
    /// Every attempted seed in ascending order; `None` marks a failed trial.
    pub trials: Vec<TrialOutcome>,
}

/// One clustering trial's scorecard.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub validation_silhouette: Option<f64>,
}

/// Fits one model per seed on `train`, scores each by validation silhouette
/// under nearest-centroid assignment, and keeps the best; ties go to the
/// lowest seed. Failed trials are logged and skipped.
pub fn select_best_run(
    train: &[Vec<f64>],
    validation: &[Vec<f64>],
    k: usize,
    seeds: &[u64],
    batch_size: usize,
    max_iters: usize,
) -> Result<BestRun> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one trial seed is required"));
    }
    let mut sorted: Vec<u64> = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let mut trials = Vec::with_capacity(sorted.len());
    let mut best: Option<BestRun> = None;
    for &seed in &sorted {
        let outcome = fit_minibatch_kmeans(train, k, batch_size, seed, max_iters)
            .and_then(|model| {
                let assignments = assign_nearest(&model.centroids, validation);
                let score = silhouette(validation, &assignments)?;
                Ok(BestRun {
                    model,
                    validation_silhouette: score.mean,
                    trials: Vec::new(),
                })
            });
        match outcome {
            Ok(run) => {
                trials.push(TrialOutcome {
                    seed,
                    validation_silhouette: Some(run.validation_silhouette),
                });
                if best
                    .as_ref()
                    .is_none_or(|b| run.validation_silhouette > b.validation_silhouette)
                {
                    best = Some(run);
                }
            }
            Err(err) => {
                trials.push(TrialOutcome {
                    seed,
                    validation_silhouette: None,
                });
                log::warn!("clustering trial with seed {seed} failed: {err}");
            }
        }
    }
    match best {
        Some(mut run) => {
            run.trials = trials;
            Ok(run)
        }
        None => Err(Error::pipeline(
            "cluster-baseline",
            "every clustering trial failed",
        )),
    }
}

/// Settings for LLM cluster naming.
#[derive(Debug, Clone)]
pub struct NamingConfig {
    /// At most this many member summaries shown per cluster (all members when
    /// the cluster is smaller).
    pub per_cluster_n: usize,
    pub use_case: String,
    pub seed: u64,
    pub settings: GenerationSettings,
    pub max_in_flight: usize,
}

impl NamingConfig {
    pub fn new(use_case: &str, seed: u64) -> Self {
        NamingConfig {
            per_cluster_n: 200,
            use_case: use_case.to_string(),
            seed,
            settings: GenerationSettings::default(),
            max_in_flight: 4,
        }
    }
}

/// A named clustering: one taxonomy label per cluster (index = cluster + 1).
#[derive(Debug, Clone)]
pub struct NamedClusters {
    pub taxonomy: Taxonomy,
    /// Clusters whose naming prompt failed and received a placeholder label.
    pub fallback_clusters: Vec<usize>,
}

/// Names every cluster from a sample of member summaries (falling back to
/// document text for documents without one). A cluster whose prompt exhausts
/// its retries gets the placeholder label "Cluster k" and is flagged.
#[allow(clippy::too_many_arguments)]
pub fn name_clusters(
    gateway: &Gateway,
    prompts: &PromptLibrary,
    model: &ClusterModel,
    doc_ids: &[String],
    sample: &CorpusSample,
    summaries: &BTreeMap<String, String>,
    config: &NamingConfig,
) -> Result<NamedClusters> {
    if doc_ids.len() != model.assignments.len() {
        return Err(Error::invalid(
            "doc id count differs from cluster assignment count",
        ));
    }
    if config.per_cluster_n == 0 {
        return Err(Error::invalid("per-cluster sample size must be positive"));
    }
    let texts: BTreeMap<&str, &str> = sample
        .documents
        .iter()
        .map(|d| (d.id.as_str(), d.text.as_str()))
        .collect();

    let k = model.k();
    let mut members: Vec<Vec<&String>> = vec![Vec::new(); k];
    for (doc_id, &cluster) in doc_ids.iter().zip(&model.assignments) {
        members[cluster].push(doc_id);
    }

    let template = prompts.get(TemplateName::ClusterName);
    let mut jobs = Vec::new();
    let mut job_for_cluster: Vec<Option<usize>> = vec![None; k];
    for (cluster, ids) in members.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ cluster as u64);
        let take = config.per_cluster_n.min(ids.len());
        let mut lines = Vec::with_capacity(take);
        for id in ids.choose_multiple(&mut rng, take) {
            let text = summaries
                .get(id.as_str())
                .map(String::as_str)
                .or_else(|| texts.get(id.as_str()).copied())
                .ok_or_else(|| {
                    Error::invalid(format!("document `{id}` has no summary and no text"))
                })?;
            lines.push(format!("- {text}"));
        }
        let rendered = template.render(&crate::gateway::slots(&[
            ("use_case", &config.use_case),
            ("summaries", &lines.join("\n")),
        ]))?;
        job_for_cluster[cluster] = Some(jobs.len());
        jobs.push(ChatJob::new(
            TemplateName::ClusterName,
            vec![rendered],
            config.settings.clone(),
            GuardrailSpec::new(vec![
                GuardrailCheck::FormatParse {
                    payload: PayloadKind::ClusterName,
                },
                GuardrailCheck::OutputLanguage {
                    expected: "en".to_string(),
                },
            ]),
        ));
    }

    let outcomes = gateway.complete_batch(&jobs, config.max_in_flight)?;
    let mut labels = Vec::with_capacity(k);
    let mut fallback_clusters = Vec::new();
    for cluster in 0..k {
        let index = cluster as u32 + 1;
        let named = match job_for_cluster[cluster] {
            None => {
                log::warn!("cluster {cluster} has no members; using a placeholder label");
                None
            }
            Some(slot) => match &outcomes[slot] {
                Ok(exchange) => {
                    let payload = exchange.extracted.as_deref().expect("successful exchange");
                    let (name, description) = crate::gateway::parse_cluster_name(payload)?;
                    Some(Label::new(index, &name, &description))
                }
                Err(Error::Exhausted { exchange }) => {
                    log::warn!(
                        "naming cluster {cluster} exhausted after {} attempts",
                        exchange.attempts
                    );
                    None
                }
                Err(other) => return Err(Error::invalid(format!("naming cluster {cluster}: {other}"))),
            },
        };
        match named {
            Some(label) => labels.push(label),
            None => {
                fallback_clusters.push(cluster);
                labels.push(Label::new(index, &format!("Cluster {index}"), ""));
            }
        }
    }

    Ok(NamedClusters {
        taxonomy: Taxonomy::new(labels, &config.use_case),
        fallback_clusters,
    })
}
