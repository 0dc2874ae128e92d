//! Sentence embeddings.
//!
//! Providers map text to 768-dimensional unit vectors. The offline provider is
//! a seeded hashing embedder over unigrams and bigrams; the external provider
//! talks JSON over HTTP to a sentence-embedding service.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerError};
use crate::seed;

pub const EMBEDDING_DIM: usize = 768;
pub const DEFAULT_EXTERNAL_MODEL: &str = "all-mpnet-base-v2";
/// Fallback endpoint variable for external providers.
pub const ENDPOINT_ENV: &str = "EEGRAG_EMBED_ENDPOINT";

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding vector contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("zero-norm embedding vector")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider unavailable: {0}")]
    Unavailable(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("item {index}: {source}")]
    Item {
        index: usize,
        #[source]
        source: Box<EmbeddingError>,
    },
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// A finite real vector. Stored as `f32`, accumulated in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self, EmbeddingError> {
        Self::new(values.iter().map(|v| *v as f32).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit-length copy.
    pub fn normalized(&self) -> Result<Self, EmbeddingError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(EmbeddingError::ZeroNorm);
        }
        Ok(Self(self.0.iter().map(|v| (*v as f64 / n) as f32).collect()))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|v| *v as f64).collect()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Unit-norm embedding of non-empty `text`.
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.embed(t).map_err(|e| EmbeddingError::Item { index, source: Box::new(e) })
            })
            .collect()
    }
}

/// Seeded hashing embedder. Each token unigram and bigram maps to a fixed
/// Gaussian direction; a text embeds to the normalized weighted sum, so texts
/// sharing tokens point in similar directions.
#[derive(Debug, Clone)]
pub struct OfflineProvider {
    seed: u64,
    name: String,
}

impl OfflineProvider {
    pub fn new(seed: u64) -> Self {
        Self { seed, name: format!("offline-hash-{seed}") }
    }

    fn feature_direction(&self, feature: &str, weight: f64, acc: &mut [f64]) {
        let mut rng = seed::rng(seed::child(self.seed, seed::stable_hash(feature.as_bytes())));
        for v in acc.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v += weight * g;
        }
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl EmbeddingProvider for OfflineProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        EMBEDDING_DIM
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let toks = tokenize(text);
        let mut acc = vec![0.0f64; EMBEDDING_DIM];
        if toks.is_empty() {
            self.feature_direction(&format!("raw:{}", text.trim()), 1.0, &mut acc);
        }
        for t in &toks {
            self.feature_direction(&format!("u:{t}"), 1.0, &mut acc);
        }
        for w in toks.windows(2) {
            self.feature_direction(&format!("b:{} {}", w[0], w[1]), 0.5, &mut acc);
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroNorm);
        }
        EmbeddingVector::new(acc.iter().map(|v| (v / norm) as f32).collect())
    }
}

/// HTTP sentence-embedding service. Requests are
/// `POST {endpoint}` with `{"model": ..., "inputs": [text, ...]}`; the reply is
/// either a bare list of vectors or `{"embeddings": [[...], ...]}`.
pub struct ExternalProvider {
    model: String,
    endpoint: String,
    agent: ureq::Agent,
}

impl ExternalProvider {
    pub fn connect(model: &str, endpoint: &str, timeout: Duration) -> Result<Self, EmbeddingError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        agent
            .get(endpoint)
            .call()
            .map_err(|e| EmbeddingError::Unavailable(format!("{endpoint}: {e}")))?;
        Ok(Self { model: model.to_string(), endpoint: endpoint.to_string(), agent })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        let body = serde_json::json!({ "model": self.model, "inputs": texts });
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| EmbeddingError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbeddingError::Unavailable(format!("HTTP {}", resp.status())));
        }
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Malformed(e.to_string()))?;
        let list = value.get("embeddings").cloned().unwrap_or(value);
        let vectors: Vec<Vec<f32>> =
            serde_json::from_value(list).map_err(|e| EmbeddingError::Malformed(e.to_string()))?;
        if vectors.len() != texts.len() {
            return Err(EmbeddingError::Malformed(format!(
                "{} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        Ok(vectors)
    }

    fn finish(values: Vec<f32>) -> Result<EmbeddingVector, EmbeddingError> {
        if values.len() != EMBEDDING_DIM {
            return Err(EmbeddingError::Dimension { expected: EMBEDDING_DIM, actual: values.len() });
        }
        EmbeddingVector::new(values)?.normalized()
    }
}

impl EmbeddingProvider for ExternalProvider {
    fn name(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        EMBEDDING_DIM
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let v = self.request(&[text])?.pop().expect("length checked");
        Self::finish(v)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::Item { index, source: Box::new(EmbeddingError::EmptyText) });
        }
        self.request(texts)?
            .into_iter()
            .enumerate()
            .map(|(index, v)| Self::finish(v).map_err(|e| EmbeddingError::Item { index, source: Box::new(e) }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    External,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_model() -> String {
    DEFAULT_EXTERNAL_MODEL.into()
}
fn default_timeout_ms() -> u64 {
    30_000
}

impl ProviderConfig {
    pub fn offline(seed: u64) -> Self {
        Self {
            kind: ProviderKind::Offline,
            model: "offline-hash".into(),
            endpoint: None,
            seed: Some(seed),
            timeout_ms: default_timeout_ms(),
        }
    }
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self::offline(0)
    }
}

pub fn make_provider(cfg: &ProviderConfig) -> Result<Box<dyn EmbeddingProvider>, EmbeddingError> {
    match cfg.kind {
        ProviderKind::Offline => Ok(Box::new(OfflineProvider::new(cfg.seed.unwrap_or(0)))),
        ProviderKind::External => {
            let endpoint = cfg
                .endpoint
                .clone()
                .or_else(|| std::env::var(ENDPOINT_ENV).ok())
                .ok_or_else(|| EmbeddingError::Config(format!("external provider needs an endpoint or {ENDPOINT_ENV}")))?;
            Ok(Box::new(ExternalProvider::connect(
                &cfg.model,
                &endpoint,
                Duration::from_millis(cfg.timeout_ms),
            )?))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    model: String,
    dim: usize,
    ids: Vec<String>,
}

const CACHE_FORMAT: &str = "eegrag-embeddings";

/// Encodes a sentence-id to vector map (ordered by id).
pub fn encode_cache(model: &str, vectors: &BTreeMap<String, EmbeddingVector>) -> Result<Vec<u8>, EmbeddingError> {
    let dim = vectors.values().next().map_or(EMBEDDING_DIM, EmbeddingVector::dim);
    let mut payload = Vec::with_capacity(vectors.len() * dim * 4);
    for v in vectors.values() {
        if v.dim() != dim {
            return Err(EmbeddingError::Dimension { expected: dim, actual: v.dim() });
        }
        payload.extend(container::f32_to_le(v.values()));
    }
    let header = CacheHeader {
        format: CACHE_FORMAT.into(),
        model: model.into(),
        dim,
        ids: vectors.keys().cloned().collect(),
    };
    Ok(container::encode(&header, &payload))
}

pub fn save_cache(path: &Path, model: &str, vectors: &BTreeMap<String, EmbeddingVector>) -> Result<Vec<u8>, EmbeddingError> {
    let bytes = encode_cache(model, vectors)?;
    std::fs::write(path, &bytes).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
    Ok(bytes)
}

/// Reads an embedding cache; returns the model name and the vectors.
pub fn load_cache(path: &Path) -> Result<(String, BTreeMap<String, EmbeddingVector>), EmbeddingError> {
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
    decode_cache(&bytes, &path.display().to_string())
}

pub fn decode_cache(bytes: &[u8], origin: &str) -> Result<(String, BTreeMap<String, EmbeddingVector>), EmbeddingError> {
    let (header, payload): (CacheHeader, _) = container::decode(bytes, origin)?;
    if header.format != CACHE_FORMAT {
        return Err(EmbeddingError::Malformed(format!("unexpected format {}", header.format)));
    }
    let values = container::f32_from_le(&payload)?;
    if values.len() != header.dim * header.ids.len() {
        return Err(EmbeddingError::Malformed(format!(
            "payload holds {} values, header declares {} x {}",
            values.len(),
            header.ids.len(),
            header.dim
        )));
    }
    let mut map = BTreeMap::new();
    for (id, chunk) in header.ids.into_iter().zip(values.chunks_exact(header.dim.max(1))) {
        map.insert(id, EmbeddingVector::new(chunk.to_vec())?);
    }
    Ok((header.model, map))
}
