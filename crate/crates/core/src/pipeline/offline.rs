use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{to_json_pretty, write_file, ExperimentConfig, PipelineError};
use crate::container::sha256_hex;
use crate::corpus::{choose_test_ids, pad_symmetric, split_corpus, CorpusSplit, SubjectCorpus};
use crate::embedding::{decode_cache, encode_cache, make_provider, EmbeddingVector};
use crate::encoder::{decode_checkpoint, encode_checkpoint};
use crate::encoder::{finalize, grid_search, GridOutcome, GridPoint};
use crate::encoder::{EncoderModel, TrainConfig, TrainingExample};
use crate::retrieval::{build_store, decode_store, encode_store, VectorStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineHashes {
    pub corpus: String,
    pub embeddings: String,
    pub model: String,
    pub store: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Complete,
    Incomplete,
}

/// `offline.json`: what the offline stage produced, or where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineManifest {
    pub status: Status,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub input_channels: usize,
    pub input_samples: usize,
    pub split: Option<CorpusSplit>,
    pub embedding_model: String,
    pub grid_used: bool,
    pub point: Option<GridPoint>,
    pub final_train_loss: Option<f64>,
    pub hashes: OfflineHashes,
}

pub struct OfflineArtifacts {
    pub manifest: OfflineManifest,
    pub model: EncoderModel,
    pub store: VectorStore,
    pub targets: BTreeMap<String, EmbeddingVector>,
}

/// Content digest of a corpus (ids, texts, shapes and samples, in trial order).
pub fn corpus_digest(corpus: &SubjectCorpus) -> String {
    let mut h = Sha256::new();
    h.update(corpus.subject_id.as_bytes());
    h.update(corpus.sample_rate_hz.to_le_bytes());
    for s in corpus.sentences.values() {
        h.update(s.sentence_id.as_bytes());
        h.update([0]);
        h.update(s.text.as_bytes());
        h.update([0]);
    }
    for t in &corpus.trials {
        h.update(t.sentence_id.as_bytes());
        h.update([0]);
        h.update((t.channels() as u64).to_le_bytes());
        h.update((t.samples() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct Progress {
    manifest: OfflineManifest,
}

/// Pad, split, embed targets, optionally grid-search, retrain on the full
/// training partition, encode it and index it. Artifacts go to `dir`.
pub fn run_offline(
    config: &ExperimentConfig,
    corpus: &SubjectCorpus,
    dir: &Path,
) -> Result<OfflineArtifacts, PipelineError> {
    corpus.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
    let subject = corpus.subject_id.clone();
    let mut progress = Progress {
        manifest: OfflineManifest {
            status: Status::Incomplete,
            subject_id: subject.clone(),
            failed_stage: None,
            error: None,
            input_channels: 0,
            input_samples: 0,
            split: None,
            embedding_model: String::new(),
            grid_used: config.grid.is_some(),
            point: None,
            final_train_loss: None,
            hashes: OfflineHashes {
                corpus: corpus_digest(corpus),
                embeddings: String::new(),
                model: String::new(),
                store: String::new(),
            },
        },
    };
    match stages(config, corpus, dir, &mut progress) {
        Ok((model, store, targets)) => {
            progress.manifest.status = Status::Complete;
            write_file(&dir.join("offline.json"), &to_json_pretty(&progress.manifest), "write", &subject)?;
            Ok(OfflineArtifacts { manifest: progress.manifest, model, store, targets })
        }
        Err(e) => {
            if let PipelineError::Stage { stage, message, .. } = &e {
                progress.manifest.failed_stage = Some(stage.to_string());
                progress.manifest.error = Some(message.clone());
            }
            let _ = std::fs::write(dir.join("offline.json"), to_json_pretty(&progress.manifest));
            Err(e)
        }
    }
}

type Built = (EncoderModel, VectorStore, BTreeMap<String, EmbeddingVector>);

fn stages(
    config: &ExperimentConfig,
    corpus: &SubjectCorpus,
    dir: &Path,
    progress: &mut Progress,
) -> Result<Built, PipelineError> {
    let subject = corpus.subject_id.as_str();
    let fail = |stage: &'static str| move |e: String| PipelineError::stage(stage, subject, e);

    let padded = pad_symmetric(corpus).map_err(|e| fail("pad")(e.to_string()))?;
    let shape = (padded.trials[0].channels(), padded.max_samples());
    progress.manifest.input_channels = shape.0;
    progress.manifest.input_samples = shape.1;

    let ids = padded.trial_ids();
    let test_ids = match &corpus.split {
        Some(s) => s.test_ids.clone(),
        None => choose_test_ids(&ids, config.test_count, crate::seed::substream(config.seed, "split"))
            .map_err(|e| fail("split")(e.to_string()))?,
    };
    let val_count = if config.grid.is_some() { config.validation_count } else { 0 };
    let split = split_corpus(&padded, &test_ids, val_count, crate::seed::substream(config.seed, "split"))
        .map_err(|e| fail("split")(e.to_string()))?;
    progress.manifest.split = Some(split.clone());

    let provider = make_provider(&config.embedding).map_err(|e| fail("embed")(e.to_string()))?;
    progress.manifest.embedding_model = provider.name().to_string();
    let unique: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let cache_path = dir.join("embeddings.bin");
    let cached = std::fs::read(&cache_path).ok().and_then(|b| decode_cache(&b, "cache").ok());
    let targets = match cached {
        Some((model, vectors)) if model == provider.name() && unique.iter().all(|id| vectors.contains_key(*id)) => {
            log::info!("{subject}: reusing cached target embeddings");
            vectors
        }
        _ => {
            let texts: Vec<&str> = unique.iter().map(|id| padded.text(id).expect("validated corpus")).collect();
            let vectors = provider.embed_batch(&texts).map_err(|e| fail("embed")(e.to_string()))?;
            unique.iter().map(|id| id.to_string()).zip(vectors).collect()
        }
    };
    let cache = encode_cache(provider.name(), &targets).map_err(|e| fail("embed")(e.to_string()))?;
    progress.manifest.hashes.embeddings = write_file(&cache_path, &cache, "embed", subject)?;

    fn example<'a>(
        padded: &'a SubjectCorpus,
        targets: &'a BTreeMap<String, EmbeddingVector>,
        id: &'a String,
    ) -> TrainingExample<'a> {
        TrainingExample {
            sentence_id: id,
            trial: padded.trial(id).expect("split ids come from the corpus"),
            target: &targets[id],
        }
    }
    let example = |id| example(&padded, &targets, id);
    let train_seed = config.train_seed();
    let point = match &config.grid {
        Some(grid) => {
            let train: Vec<_> = split.train.iter().map(example).collect();
            let val: Vec<_> = split.validation.iter().map(example).collect();
            let outcome: GridOutcome = grid_search(&train, &val, shape, &grid.points, &grid.seeds)
                .map_err(|e| fail("grid_search")(e.to_string()))?;
            write_file(&dir.join("grid.json"), &to_json_pretty(&outcome), "grid_search", subject)?;
            outcome.best
        }
        None => GridPoint { encoder: config.encoder.clone(), train: config.train.clone() },
    };
    let point = GridPoint { train: TrainConfig { seed: train_seed, ..point.train }, ..point };
    progress.manifest.point = Some(point.clone());

    let full_ids = split.full_train();
    let full: Vec<_> = full_ids.iter().map(example).collect();
    let test_set: BTreeSet<String> = split.test.iter().cloned().collect();
    let model = finalize(&full, &test_set, shape, &point).map_err(|e| fail("finalize")(e.to_string()))?;
    progress.manifest.final_train_loss = model.training_history.last().map(|h| h.train_loss);
    progress.manifest.hashes.model =
        write_file(&dir.join("encoder.bin"), &encode_checkpoint(&model), "finalize", subject)?;

    let mut entries = Vec::with_capacity(full_ids.len());
    for id in &full_ids {
        let z = model.forward(padded.trial(id).expect("split ids")).map_err(|e| fail("encode")(e.to_string()))?;
        entries.push((id.clone(), padded.text(id).expect("validated").to_string(), z));
    }
    let allowed: BTreeSet<String> = full_ids.iter().cloned().collect();
    let store = build_store(entries, &allowed).map_err(|e| fail("index")(e.to_string()))?;
    progress.manifest.hashes.store = write_file(&dir.join("store.bin"), &encode_store(&store), "index", subject)?;
    Ok((model, store, targets))
}

fn read_verified(dir: &Path, name: &str, expected: &str, subject: &str) -> Result<Vec<u8>, PipelineError> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| PipelineError::stage("verify", subject, format!("{}: {e}", path.display())))?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(PipelineError::stage(
            "verify",
            subject,
            format!("{} hash {actual} does not match manifest {expected}", path.display()),
        ));
    }
    Ok(bytes)
}

/// Reloads a completed offline stage, checking every artifact hash against `offline.json`.
pub fn load_offline_artifacts(dir: &Path) -> Result<OfflineArtifacts, PipelineError> {
    let path = dir.join("offline.json");
    let manifest: OfflineManifest = std::fs::read(&path)
        .map_err(|e| e.to_string())
        .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
        .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
    let subject = manifest.subject_id.clone();
    if manifest.status != Status::Complete {
        return Err(PipelineError::stage(
            "verify",
            &subject,
            format!("offline stage incomplete (failed at {})", manifest.failed_stage.as_deref().unwrap_or("?")),
        ));
    }
    let model_bytes = read_verified(dir, "encoder.bin", &manifest.hashes.model, &subject)?;
    let model = decode_checkpoint(&model_bytes, "encoder.bin").map_err(|e| PipelineError::stage("verify", &subject, e))?;
    let store_bytes = read_verified(dir, "store.bin", &manifest.hashes.store, &subject)?;
    let store = decode_store(&store_bytes, "store.bin").map_err(|e| PipelineError::stage("verify", &subject, e))?;
    let cache_bytes = read_verified(dir, "embeddings.bin", &manifest.hashes.embeddings, &subject)?;
    let (_, targets) = decode_cache(&cache_bytes, "embeddings.bin").map_err(|e| PipelineError::stage("verify", &subject, e))?;
    Ok(OfflineArtifacts { manifest, model, store, targets })
}
