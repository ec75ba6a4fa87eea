//! The run configuration file: one TOML document shared by every command,
//! with per-command sections. Flags override file values; the file is the
//! reproducible record of a run.
//!
//! Seeds are mandatory — there is no wall-clock fallback, so a config that
//! omits `[seeds]` is rejected rather than silently non-reproducible.

use std::path::{Path, PathBuf};

use labelmill::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// The analysis goal, interpolated into every LLM prompt.
    pub use_case: Option<String>,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub corpus: Option<CorpusConfig>,
    #[serde(default)]
    pub splits: SplitConfig,
    #[serde(default)]
    pub requirements: RequirementsConfig,
    pub llm: Option<LlmConfig>,
    pub embedding: Option<EmbeddingConfig>,
    #[serde(default)]
    pub phase1: Phase1Knobs,
    #[serde(default)]
    pub annotate: AnnotateConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    /// Every derived seed (splits, shuffles, trials, embeddings) starts here.
    pub master: u64,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_out_dir(),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// `jsonl` (one document per line) or `dir` (one text file per document).
    #[serde(default = "default_corpus_format")]
    pub format: String,
    /// Filter rules applied in order, e.g. `min-length=3`.
    #[serde(default)]
    pub filters: Vec<String>,
    /// Random subsample taken after filtering; omit to keep everything.
    pub sample_size: Option<usize>,
}

fn default_corpus_format() -> String {
    "jsonl".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequirementsConfig {
    pub target_count: usize,
    pub max_count: usize,
    pub max_words_per_name: usize,
}

impl Default for RequirementsConfig {
    fn default() -> Self {
        RequirementsConfig {
            target_count: 10,
            max_count: 25,
            max_words_per_name: 5,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    /// `rule` (keyword mock), `script` (recorded fixture), or `http`.
    pub backend: String,
    /// Topic rules for the `rule` backend.
    #[serde(default)]
    pub rules: Vec<RuleEntry>,
    /// Fixture path for the `script` backend.
    pub script_path: Option<PathBuf>,
    /// Chat-completion endpoint for the `http` backend (key via LLM_API_KEY).
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleEntry {
    pub keyword: String,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// `hashing` (offline, deterministic) or `http`.
    #[serde(default = "default_embedding_provider")]
    pub provider: String,
    #[serde(default = "default_embedding_dim")]
    pub dim: usize,
    /// Defaults to the master seed.
    pub seed: Option<u64>,
    /// `l2` or `none`.
    #[serde(default = "default_normalization")]
    pub normalization: String,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    #[serde(default = "default_embed_retries")]
    pub max_retries: u32,
    /// Optional on-disk vector cache, useful in front of the http provider.
    pub cache_dir: Option<PathBuf>,
}

fn default_embedding_provider() -> String {
    "hashing".to_string()
}

fn default_embedding_dim() -> usize {
    256
}

fn default_normalization() -> String {
    "l2".to_string()
}

fn default_embed_retries() -> u32 {
    3
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Knobs {
    pub word_target: usize,
    pub batch_size: usize,
    pub trials: usize,
    pub selection_runs: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub min_subgroup: usize,
    pub max_in_flight: usize,
}

impl Default for Phase1Knobs {
    fn default() -> Self {
        Phase1Knobs {
            word_target: 20,
            batch_size: 200,
            trials: 10,
            selection_runs: 4,
            eval_every: 1,
            patience: 3,
            min_subgroup: 50,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateConfig {
    /// `primary_only` or `primary_and_all`.
    pub mode: Option<String>,
    /// Taxonomy to label against; defaults to `<output.dir>/taxonomy.md`.
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `logit`, `mlp`, `multilabel-logit`, or `multilabel-mlp`.
    #[serde(default = "default_train_model")]
    pub model: String,
    /// Defaults to `<output.dir>/assignments.jsonl`.
    pub assignments: Option<PathBuf>,
    /// Label universe for the multilabel families; defaults to
    /// `<output.dir>/taxonomy.md`.
    pub taxonomy: Option<PathBuf>,
    /// L2 grid for the logit families.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Hidden-width grid for the MLP families.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: default_train_model(),
            assignments: None,
            taxonomy: None,
            lambdas: default_lambdas(),
            hidden: default_hidden(),
        }
    }
}

fn default_train_model() -> String {
    "logit".to_string()
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0001, 0.001, 0.01, 0.1]
}

fn default_hidden() -> Vec<usize> {
    vec![8, 16, 32]
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Defaults to `<output.dir>/model.bin`.
    pub model_path: Option<PathBuf>,
    /// Optional taxonomy used to attach label names to predictions.
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Number of seeded restarts; seeds are master, master+1, ...
    pub trials: usize,
    /// Explicit restart seeds; overrides `trials` when non-empty.
    #[serde(default)]
    pub trial_seeds: Vec<u64>,
    /// Member summaries shown per cluster in the naming prompt.
    pub per_cluster_n: usize,
    /// Optional summaries.jsonl used for naming instead of raw text.
    pub summaries: Option<PathBuf>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 8,
            batch_size: 1024,
            max_iters: 50,
            trials: 3,
            trial_seeds: Vec::new(),
            per_cluster_n: 200,
            summaries: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub gold: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    /// Assignment files, one rater each, keyed by file stem in the report.
    #[serde(default)]
    pub raters: Vec<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config `{}`: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        let s = &self.splits;
        for (name, f) in [
            ("train", s.train),
            ("validation", s.validation),
            ("test", s.test),
        ] {
            if !f.is_finite() || !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "splits.{name} must be a fraction in [0, 1], got {f}"
                )));
            }
        }
        if let Some(llm) = &self.llm {
            match llm.backend.as_str() {
                "rule" | "script" | "http" => {}
                other => {
                    return Err(Error::Config(format!(
                        "llm.backend must be rule, script, or http, got `{other}`"
                    )))
                }
            }
        }
        if let Some(embedding) = &self.embedding {
            match embedding.provider.as_str() {
                "hashing" | "http" => {}
                other => {
                    return Err(Error::Config(format!(
                        "embedding.provider must be hashing or http, got `{other}`"
                    )))
                }
            }
            match embedding.normalization.as_str() {
                "l2" | "none" => {}
                other => {
                    return Err(Error::Config(format!(
                        "embedding.normalization must be l2 or none, got `{other}`"
                    )))
                }
            }
        }
        Ok(())
    }

    /// The analysis instruction, required by every LLM-facing command.
    pub fn use_case(&self) -> Result<&str> {
        match self.use_case.as_deref() {
            Some(s) if !s.trim().is_empty() => Ok(s),
            _ => Err(Error::Config(
                "set `use_case` at the top of the config file".to_string(),
            )),
        }
    }

    pub fn corpus(&self) -> Result<&CorpusConfig> {
        self.corpus.as_ref().ok_or_else(|| {
            Error::Config("this command needs a [corpus] section with a path".to_string())
        })
    }

    pub fn llm(&self) -> Result<&LlmConfig> {
        self.llm.as_ref().ok_or_else(|| {
            Error::Config(
                "this command needs an [llm] section (backend = \"rule\", \"script\", or \"http\")"
                    .to_string(),
            )
        })
    }

    pub fn embedding(&self) -> Result<&EmbeddingConfig> {
        self.embedding.as_ref().ok_or_else(|| {
            Error::Config(
                "this command needs embeddings; add an [embedding] section \
                 (provider = \"hashing\" works offline)"
                    .to_string(),
            )
        })
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.output.dir.join(name)
    }

    /// Default-or-override pattern for per-command input paths.
    pub fn input_path(&self, configured: &Option<PathBuf>, default_name: &str) -> PathBuf {
        configured
            .clone()
            .unwrap_or_else(|| self.out_path(default_name))
    }
}

/// Fail-fast existence check, run before any backend is constructed.
pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} `{}` does not exist",
            path.display()
        )))
    }
}

pub fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} `{}` does not exist",
            path.display()
        )))
    }
}
