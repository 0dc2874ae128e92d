//! Sentence-level EEG-to-text decoding.
//!
//! A convolutional encoder maps each multichannel EEG trial onto the space of
//! pretrained sentence embeddings. Test trials are decoded by exact cosine
//! retrieval over the encoded training trials followed by a pluggable
//! language-model refinement step. Decoding quality is measured against a
//! temporal-permutation baseline with one-sided Wilcoxon signed-rank tests and
//! Benjamini-Hochberg correction.
//!
//! Module map:
//!
//! - [`corpus`]: trial data model, on-disk format, padding, splits, synthetic data
//! - [`embedding`]: sentence embedding providers and the embedding cache
//! - [`encoder`]: the EEG encoder, cosine-alignment training, grid search
//! - [`retrieval`]: exact flat cosine vector store
//! - [`refine`]: language-model refinement clients
//! - [`baseline`]: temporal-permutation random baseline
//! - [`stats`]: Wilcoxon, BH-FDR, subject and dataset analyses, reports
//! - [`pipeline`]: offline/online orchestration, manifests, plot data

pub mod baseline;
pub mod container;
pub mod corpus;
pub mod decode;
pub mod embedding;
pub mod encoder;
pub mod pipeline;
pub mod refine;
pub mod retrieval;
pub mod seed;
pub mod stats;

pub use corpus::{EegTrial, SentenceRecord, SubjectCorpus};
pub use embedding::{EmbeddingProvider, EmbeddingVector, EMBEDDING_DIM};
pub use encoder::{EncoderConfig, EncoderModel, TrainConfig};
pub use retrieval::{RetrievalResult, VectorStore};
pub use stats::EvalReport;
