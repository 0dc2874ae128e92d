//! The single decoding path shared by real and baseline evaluation:
//! encode → retrieve → refine → embed, then a separate scoring step.
//!
//! Ground-truth embeddings are reachable only through [`GroundTruth`], which
//! logs every access in an [`AuditLog`] together with the current stage.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::EegTrial;
use crate::embedding::{EmbeddingProvider, EmbeddingVector};
use crate::encoder::EncoderModel;
use crate::refine::{refine, RefineClient, RefineRequest};
use crate::retrieval::{Hit, VectorStore};
use crate::stats::cosine_similarity;

/// Tag stamped on every decoded item; identical for real and baseline inputs.
pub const TRACE_TAG: &str = "encode>retrieve>refine>embed";

#[derive(Debug, thiserror::Error)]
#[error("sentence {sentence_id}: {stage} failed: {message}")]
pub struct DecodeError {
    pub sentence_id: String,
    pub stage: &'static str,
    pub message: String,
}

impl DecodeError {
    fn at(sentence_id: &str, stage: &'static str, e: impl std::fmt::Display) -> Self {
        Self { sentence_id: sentence_id.into(), stage, message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generation,
    Scoring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    RefinerInput { stage: Stage, query: String, sentence_ids: Vec<String> },
    GroundTruthAccess { stage: Stage, sentence_id: String },
    EnterStage { stage: Stage },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    stage: Stage,
    events: Vec<AuditEvent>,
}

impl Default for AuditLog {
    fn default() -> Self {
        Self { stage: Stage::Generation, events: Vec::new() }
    }
}

impl AuditLog {
    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn enter(&mut self, stage: Stage) {
        self.stage = stage;
        self.events.push(AuditEvent::EnterStage { stage });
    }

    fn push(&mut self, e: AuditEvent) {
        self.events.push(e);
    }

    pub fn ground_truth_accesses(&self, stage: Stage) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, AuditEvent::GroundTruthAccess { stage: s, .. } if *s == stage))
            .count()
    }

    /// Every sentence id whose text was shown to the refiner.
    pub fn refiner_visible(&self) -> BTreeSet<&str> {
        self.events
            .iter()
            .filter_map(|e| match e {
                AuditEvent::RefinerInput { sentence_ids, .. } => Some(sentence_ids.iter().map(String::as_str)),
                _ => None,
            })
            .flatten()
            .collect()
    }
}

/// Held-out sentence texts and embeddings, available only for scoring.
pub struct GroundTruth {
    items: BTreeMap<String, (String, EmbeddingVector)>,
}

impl GroundTruth {
    pub fn new(items: BTreeMap<String, (String, EmbeddingVector)>) -> Self {
        Self { items }
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.items.keys().cloned().collect()
    }

    pub fn texts(&self) -> BTreeSet<&str> {
        self.items.values().map(|(t, _)| t.as_str()).collect()
    }

    pub fn embedding(&self, sentence_id: &str, audit: &mut AuditLog) -> Option<&EmbeddingVector> {
        audit.push(AuditEvent::GroundTruthAccess { stage: audit.stage(), sentence_id: sentence_id.into() });
        self.items.get(sentence_id).map(|(_, e)| e)
    }
}

/// One decoded trial. `label` is the sentence id it will be scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub label: String,
    pub retrieved: Vec<Hit>,
    pub output_sentence: String,
    pub client_name: String,
    pub latency_ms: f64,
    pub trace: String,
    #[serde(skip)]
    pub output_embedding: Option<EmbeddingVector>,
}

pub struct Decoder<'a> {
    pub model: &'a EncoderModel,
    pub store: &'a VectorStore,
    pub refiner: &'a dyn RefineClient,
    pub provider: &'a dyn EmbeddingProvider,
    pub k: usize,
    pub retries: usize,
    pub prompt_template: String,
}

impl Decoder<'_> {
    /// Generation only; never touches ground truth.
    pub fn decode(&self, label: &str, trial: &EegTrial, audit: &mut AuditLog) -> Result<Decoded, DecodeError> {
        let z = self.model.forward(trial).map_err(|e| DecodeError::at(label, "encode", e))?;
        let result = self.store.query(label, &z, self.k).map_err(|e| DecodeError::at(label, "retrieve", e))?;
        audit.push(AuditEvent::RefinerInput {
            stage: audit.stage(),
            query: label.into(),
            sentence_ids: result.hits.iter().map(|h| h.sentence_id.clone()).collect(),
        });
        let texts = result.hits.iter().map(|h| h.text.clone()).collect();
        let request =
            RefineRequest::new(texts, self.prompt_template.clone()).map_err(|e| DecodeError::at(label, "refine", e))?;
        let refined = refine(self.refiner, &request, self.retries).map_err(|e| DecodeError::at(label, "refine", e))?;
        let embedding =
            self.provider.embed(&refined.output_sentence).map_err(|e| DecodeError::at(label, "embed", e))?;
        Ok(Decoded {
            label: label.into(),
            retrieved: result.hits,
            output_sentence: refined.output_sentence,
            client_name: refined.client_name,
            latency_ms: refined.latency_ms,
            trace: TRACE_TAG.into(),
            output_embedding: Some(embedding),
        })
    }
}

/// Cosine similarity between a decoded output and its label's ground truth.
pub fn score(decoded: &Decoded, truth: &GroundTruth, audit: &mut AuditLog) -> Result<f64, DecodeError> {
    let label = decoded.label.as_str();
    let out = decoded.output_embedding.as_ref().ok_or_else(|| DecodeError::at(label, "score", "missing output embedding"))?;
    let target = truth.embedding(label, audit).ok_or_else(|| DecodeError::at(label, "score", "unknown label"))?;
    cosine_similarity(out, target).map_err(|e| DecodeError::at(label, "score", e))
}
