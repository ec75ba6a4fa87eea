//! Text embeddings: the provider contract shared by classifiers and the
//! clustering baseline, plus a deterministic offline hashing embedder.
//!
//! The hashing embedder maps 1–2 word n-grams into signed buckets and
//! l2-normalizes, making it a pure function of `(text, dim, seed)`. Remote
//! providers go through the same [`EmbeddingBackend`] trait with plain
//! retries (no temperature — embeddings are not sampled), and an optional
//! on-disk cache keyed by `(provider_id, text digest)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One embedded text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    L2,
}

/// A matrix of embeddings with row-aligned document ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDataset {
    pub doc_ids: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub provider_id: String,
    pub normalization: Normalization,
}

impl EmbeddedDataset {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i]
    }

    pub fn validate(&self) -> Result<()> {
        if self.doc_ids.len() != self.matrix.len() {
            return Err(Error::invalid(format!(
                "{} doc ids but {} rows",
                self.doc_ids.len(),
                self.matrix.len()
            )));
        }
        let dim = self.dim();
        for (i, row) in self.matrix.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::invalid(format!(
                    "row {i} has dim {}, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {i} has a non-finite entry")));
            }
            if self.normalization == Normalization::L2 {
                let norm = l2_norm(row);
                if norm > 1e-12 && (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "row {i} claims l2 normalization but has norm {norm}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rows for the given ids, in the given order. Unknown ids are an error.
    pub fn subset_by_ids(&self, ids: &[String]) -> Result<EmbeddedDataset> {
        let index: BTreeMap<&str, usize> = self
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut matrix = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::invalid(format!("doc id `{id}` not in embedded dataset")))?;
            matrix.push(self.matrix[i].clone());
        }
        Ok(EmbeddedDataset {
            doc_ids: ids.to_vec(),
            matrix,
            provider_id: self.provider_id.clone(),
            normalization: self.normalization,
        })
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalize to unit length; zero vectors stay zero.
pub fn l2_normalize(v: &mut [f64]) {
    let norm = l2_norm(v);
    if norm > 1e-12 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

// FNV-1a, 64-bit. The feature space must be stable across toolchain updates
// (persisted model weights are tied to bucket positions), so the hash is
// pinned here instead of borrowing std's unstable-by-design default hasher.
const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Hash 1–2 gram counts of `text` into `dim` signed buckets, l2-normalized.
/// Pure function of `(text, dim, seed)`; empty text gives the zero vector.
pub fn hashing_embed(text: &str, dim: usize, seed: u64) -> Result<EmbeddingVector> {
    if dim < 2 {
        return Err(Error::invalid(format!("embedding dim {dim} must be at least 2")));
    }
    let tokens = tokenize(text);
    let mut values = vec![0.0f64; dim];
    let mut add = |gram: &str| {
        let bucket = (fnv1a(gram.as_bytes(), seed) % dim as u64) as usize;
        // Independent salt so the sign is uncorrelated with the bucket.
        let sign = if fnv1a(gram.as_bytes(), seed ^ 0x9E37_79B9_7F4A_7C15) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        values[bucket] += sign;
    };
    for token in &tokens {
        add(token);
    }
    for pair in tokens.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    l2_normalize(&mut values);
    Ok(EmbeddingVector {
        values,
        provider_id: format!("hash-{dim}-{seed}"),
    })
}

/// A provider of embeddings. Implementations must be reentrant.
pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// One result per text, in input order. Per-item failures never abort
    /// the chunk.
    fn embed_chunk(&self, texts: &[String]) -> Vec<Result<Vec<f64>>>;
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for Box<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_chunk(&self, texts: &[String]) -> Vec<Result<Vec<f64>>> {
        (**self).embed_chunk(texts)
    }
}

/// The offline provider: [`hashing_embed`] applied per text.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("embedding dim {dim} must be at least 2")));
        }
        Ok(HashingEmbedder { dim, seed })
    }
}

impl EmbeddingBackend for HashingEmbedder {
    fn id(&self) -> String {
        format!("hash-{}-{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_chunk(&self, texts: &[String]) -> Vec<Result<Vec<f64>>> {
        texts
            .iter()
            .map(|t| hashing_embed(t, self.dim, self.seed).map(|v| v.values))
            .collect()
    }
}

/// Remote embedding provider speaking the usual JSON wire shape:
/// `POST {model, input: [...]}` → `{data: [{index, embedding}]}`.
/// Failures are retried whole-chunk up to `max_retries` times (no
/// temperature: embeddings are not sampled), then reported per item.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: String,
    dim: usize,
    max_retries: u32,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireEmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct WireEmbedItem {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct WireEmbedResponse {
    data: Vec<WireEmbedItem>,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, dim: usize, max_retries: u32) -> Result<Self> {
        let api_key = std::env::var(crate::gateway::API_KEY_ENV).map_err(|_| {
            Error::Config(format!("{} is not set", crate::gateway::API_KEY_ENV))
        })?;
        Self::with_api_key(endpoint, model, dim, max_retries, &api_key)
    }

    pub fn with_api_key(
        endpoint: &str,
        model: &str,
        dim: usize,
        max_retries: u32,
        api_key: &str,
    ) -> Result<Self> {
        if endpoint.trim().is_empty() {
            return Err(Error::Config("embedding endpoint must be non-empty".to_string()));
        }
        if dim < 2 {
            return Err(Error::Config(format!("embedding dim {dim} must be at least 2")));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Backend {
                backend: "http-embed".to_string(),
                reason: e.to_string(),
            })?;
        Ok(HttpEmbedder {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: api_key.to_string(),
            dim,
            max_retries,
            client,
        })
    }

    fn request_once(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = WireEmbedRequest {
            model: &self.model,
            input: texts,
        };
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Error::Backend {
                backend: "http-embed".to_string(),
                reason: e.to_string(),
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| Error::Backend {
            backend: "http-embed".to_string(),
            reason: e.to_string(),
        })?;
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            return Err(Error::Backend {
                backend: "http-embed".to_string(),
                reason: format!("status {status}: {snippet}"),
            });
        }
        let parsed: WireEmbedResponse = serde_json::from_str(&text).map_err(|e| Error::Backend {
            backend: "http-embed".to_string(),
            reason: format!("bad response body: {e}"),
        })?;
        if parsed.data.len() != texts.len() {
            return Err(Error::Backend {
                backend: "http-embed".to_string(),
                reason: format!("asked for {} embeddings, got {}", texts.len(), parsed.data.len()),
            });
        }
        let mut rows = vec![Vec::new(); texts.len()];
        for item in parsed.data {
            if item.index >= texts.len() {
                return Err(Error::Backend {
                    backend: "http-embed".to_string(),
                    reason: format!("embedding index {} out of range", item.index),
                });
            }
            rows[item.index] = item.embedding;
        }
        Ok(rows)
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn id(&self) -> String {
        format!("http-{}", self.model)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_chunk(&self, texts: &[String]) -> Vec<Result<Vec<f64>>> {
        let mut last_err = None;
        for attempt in 0..=self.max_retries {
            match self.request_once(texts) {
                Ok(rows) => return rows.into_iter().map(Ok).collect(),
                Err(e) => {
                    log::warn!("embedding chunk attempt {}: {e}", attempt + 1);
                    last_err = Some(e.to_string());
                }
            }
        }
        let reason = last_err.unwrap_or_else(|| "unknown failure".to_string());
        texts
            .iter()
            .map(|_| {
                Err(Error::Backend {
                    backend: "http-embed".to_string(),
                    reason: reason.clone(),
                })
            })
            .collect()
    }
}

/// Wraps a backend with an on-disk cache: one JSON file per
/// `(provider_id, sha256(text))`, so re-running a pipeline never re-embeds
/// unchanged text.
pub struct CachedEmbedder<B: EmbeddingBackend> {
    inner: B,
    dir: PathBuf,
}

impl<B: EmbeddingBackend> CachedEmbedder<B> {
    pub fn new(inner: B, cache_dir: &Path) -> Result<Self> {
        let dir = cache_dir.join(sanitize(&inner.id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::IoPath {
            path: dir.clone(),
            source: e,
        })?;
        Ok(CachedEmbedder { inner, dir })
    }

    fn cache_path(&self, text: &str) -> PathBuf {
        let digest = Sha256::digest(text.as_bytes());
        let mut name = String::with_capacity(64);
        for b in digest {
            name.push_str(&format!("{b:02x}"));
        }
        self.dir.join(format!("{name}.json"))
    }

    fn read_cached(&self, text: &str) -> Option<Vec<f64>> {
        let path = self.cache_path(text);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice::<Vec<f64>>(&bytes) {
            Ok(v) if v.len() == self.inner.dim() => Some(v),
            // Corrupt or stale entries are recomputed, not fatal.
            _ => {
                log::warn!("discarding unreadable cache entry {}", path.display());
                None
            }
        }
    }

    fn write_cached(&self, text: &str, values: &[f64]) {
        let path = self.cache_path(text);
        match serde_json::to_vec(values) {
            Ok(bytes) => {
                if let Err(e) = std::fs::write(&path, bytes) {
                    log::warn!("cache write {} failed: {e}", path.display());
                }
            }
            Err(e) => log::warn!("cache encode failed: {e}"),
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl<B: EmbeddingBackend> EmbeddingBackend for CachedEmbedder<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_chunk(&self, texts: &[String]) -> Vec<Result<Vec<f64>>> {
        let mut results: Vec<Option<Result<Vec<f64>>>> = texts.iter().map(|_| None).collect();
        let mut misses = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            match self.read_cached(text) {
                Some(v) => results[i] = Some(Ok(v)),
                None => misses.push(i),
            }
        }
        if !misses.is_empty() {
            let miss_texts: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            for (&i, outcome) in misses.iter().zip(self.inner.embed_chunk(&miss_texts)) {
                if let Ok(values) = &outcome {
                    self.write_cached(&texts[i], values);
                }
                results[i] = Some(outcome);
            }
        }
        results
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    }
}

/// One text that could not be embedded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmbedFailure {
    pub doc_id: String,
    pub reason: String,
}

/// Result of embedding a corpus: successful rows in input order, plus the
/// per-item failures the batch survived.
#[derive(Debug)]
pub struct EmbedOutcome {
    pub dataset: EmbeddedDataset,
    pub failures: Vec<EmbedFailure>,
}

const EMBED_CHUNK: usize = 64;

/// Embed `(id, text)` pairs through a backend. Successes keep input order;
/// failures are collected, never fatal to the batch.
pub fn embed_batch(
    ids: &[String],
    texts: &[String],
    backend: &dyn EmbeddingBackend,
    normalization: Normalization,
) -> Result<EmbedOutcome> {
    if ids.len() != texts.len() {
        return Err(Error::invalid(format!(
            "{} ids but {} texts",
            ids.len(),
            texts.len()
        )));
    }
    if texts.is_empty() {
        return Err(Error::invalid("nothing to embed"));
    }
    let mut doc_ids = Vec::new();
    let mut matrix = Vec::new();
    let mut failures = Vec::new();
    for (chunk_ids, chunk_texts) in ids.chunks(EMBED_CHUNK).zip(texts.chunks(EMBED_CHUNK)) {
        for (id, outcome) in chunk_ids.iter().zip(backend.embed_chunk(chunk_texts)) {
            match outcome {
                Ok(mut values) => {
                    if normalization == Normalization::L2 {
                        l2_normalize(&mut values);
                    }
                    doc_ids.push(id.clone());
                    matrix.push(values);
                }
                Err(e) => failures.push(EmbedFailure {
                    doc_id: id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
    }
    let dataset = EmbeddedDataset {
        doc_ids,
        matrix,
        provider_id: backend.id(),
        normalization,
    };
    dataset.validate()?;
    Ok(EmbedOutcome { dataset, failures })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}
