//! Exact flat cosine-similarity vector store.
//!
//! Vectors are unit-normalized on insert, so similarity is a dot product.
//! Ties are broken by insertion order. Stores only accept ids from their
//! provenance set; any other id is treated as test-partition leakage.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerError};
use crate::embedding::{EmbeddingError, EmbeddingVector};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("test-partition leakage: sentence {0} is not in the allowed training ids")]
    Leakage(String),
    #[error("zero-norm vector for sentence {0}")]
    ZeroNorm(String),
    #[error("dimension mismatch for {id}: expected {expected}, got {actual}")]
    Dimension { id: String, expected: usize, actual: usize },
    #[error("duplicate sentence id {0} in store")]
    Duplicate(String),
    #[error("query against an empty store")]
    EmptyStore,
    #[error("k = {k} out of range 1..={size}")]
    KOutOfRange { k: usize, size: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("malformed store file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub sentence_id: String,
    pub text: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    entries: Vec<StoreEntry>,
    provenance: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub sentence_id: String,
    pub text: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_sentence_id: String,
    pub hits: Vec<Hit>,
}

/// Builds a store from `(sentence_id, text, vector)` triples. Every id must be
/// in `allowed_ids`.
pub fn build_store(
    embeddings: Vec<(String, String, EmbeddingVector)>,
    allowed_ids: &BTreeSet<String>,
) -> Result<VectorStore, RetrievalError> {
    let dim = embeddings.first().map_or(0, |e| e.2.dim());
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(embeddings.len());
    for (sentence_id, text, vector) in embeddings {
        if !allowed_ids.contains(&sentence_id) {
            return Err(RetrievalError::Leakage(sentence_id));
        }
        if vector.dim() != dim {
            return Err(RetrievalError::Dimension { id: sentence_id, expected: dim, actual: vector.dim() });
        }
        if !seen.insert(sentence_id.clone()) {
            return Err(RetrievalError::Duplicate(sentence_id));
        }
        let vector = match vector.normalized() {
            Ok(v) => v,
            Err(EmbeddingError::ZeroNorm) => return Err(RetrievalError::ZeroNorm(sentence_id)),
            Err(e) => return Err(e.into()),
        };
        entries.push(StoreEntry { sentence_id, text, vector });
    }
    Ok(VectorStore { dim, entries, provenance: allowed_ids.clone() })
}

impl VectorStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn provenance(&self) -> &BTreeSet<String> {
        &self.provenance
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.sentence_id.as_str())
    }

    /// Ids present both in the store and in `test_ids`; empty when isolated.
    pub fn overlap_with<'a>(&'a self, test_ids: &'a BTreeSet<String>) -> Vec<&'a str> {
        self.ids().filter(|id| test_ids.contains(*id)).collect()
    }

    /// Exact top-`k` by cosine similarity.
    pub fn query(&self, query_sentence_id: &str, z: &EmbeddingVector, k: usize) -> Result<RetrievalResult, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        if k == 0 || k > self.entries.len() {
            return Err(RetrievalError::KOutOfRange { k, size: self.entries.len() });
        }
        if z.dim() != self.dim {
            return Err(RetrievalError::Dimension { id: query_sentence_id.into(), expected: self.dim, actual: z.dim() });
        }
        let q = match z.normalized() {
            Ok(v) => v,
            Err(EmbeddingError::ZeroNorm) => return Err(RetrievalError::ZeroNorm(query_sentence_id.into())),
            Err(e) => return Err(e.into()),
        };
        let mut scored: Vec<(f64, usize)> = self.entries.iter().enumerate().map(|(i, e)| (q.dot(&e.vector), i)).collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering { b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)) };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        let hits = scored
            .into_iter()
            .map(|(similarity, i)| Hit {
                sentence_id: self.entries[i].sentence_id.clone(),
                text: self.entries[i].text.clone(),
                similarity,
            })
            .collect();
        Ok(RetrievalResult { query_sentence_id: query_sentence_id.into(), hits })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    dim: usize,
    entries: Vec<EntryHeader>,
    provenance: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    sentence_id: String,
    text: String,
}

const FORMAT: &str = "eegrag-store";

pub fn encode_store(store: &VectorStore) -> Vec<u8> {
    let header = StoreHeader {
        format: FORMAT.into(),
        dim: store.dim,
        entries: store
            .entries
            .iter()
            .map(|e| EntryHeader { sentence_id: e.sentence_id.clone(), text: e.text.clone() })
            .collect(),
        provenance: store.provenance.iter().cloned().collect(),
    };
    let payload: Vec<u8> = store.entries.iter().flat_map(|e| container::f32_to_le(e.vector.values())).collect();
    container::encode(&header, &payload)
}

pub fn decode_store(bytes: &[u8], origin: &str) -> Result<VectorStore, RetrievalError> {
    let (header, payload): (StoreHeader, _) = container::decode(bytes, origin)?;
    if header.format != FORMAT {
        return Err(RetrievalError::Malformed(format!("unexpected format {}", header.format)));
    }
    let values = container::f32_from_le(&payload)?;
    if values.len() != header.dim * header.entries.len() {
        return Err(RetrievalError::Malformed("payload size does not match header".into()));
    }
    let provenance: BTreeSet<String> = header.provenance.into_iter().collect();
    let mut entries = Vec::with_capacity(header.entries.len());
    for (e, chunk) in header.entries.into_iter().zip(values.chunks_exact(header.dim.max(1))) {
        if !provenance.contains(&e.sentence_id) {
            return Err(RetrievalError::Leakage(e.sentence_id));
        }
        entries.push(StoreEntry { sentence_id: e.sentence_id, text: e.text, vector: EmbeddingVector::new(chunk.to_vec())? });
    }
    Ok(VectorStore { dim: header.dim, entries, provenance })
}

pub fn save_store(store: &VectorStore, path: &Path) -> Result<Vec<u8>, RetrievalError> {
    let bytes = encode_store(store);
    std::fs::write(path, &bytes).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
    Ok(bytes)
}

pub fn load_store(path: &Path) -> Result<VectorStore, RetrievalError> {
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
    decode_store(&bytes, &path.display().to_string())
}
