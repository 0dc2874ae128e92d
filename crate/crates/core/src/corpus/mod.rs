//! Sentence-aligned EEG corpora.
//!
//! A corpus directory holds `manifest.json` and one binary tensor per trial.
//! Tensors are little-endian `f32`, row-major channel-by-time.

mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::seed;

pub use synthetic::{generate_synthetic, synthetic_template, SyntheticConfig};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("invalid manifest {path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing trial data: {file} (sentence {sentence_id})")]
    MissingTrialData { file: String, sentence_id: String },
    #[error("shape mismatch for {file}: manifest declares {channels}x{samples} ({expected} bytes), file has {actual} bytes")]
    ShapeMismatch {
        file: String,
        channels: usize,
        samples: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {context} at flat index {index}")]
    NonFinite { context: String, index: usize },
    #[error("duplicate sentence id {0}")]
    DuplicateSentenceId(String),
    #[error("trial references unknown sentence id {0}")]
    UnknownSentence(String),
    #[error("invalid trial shape {channels}x{samples}: data has {len} values")]
    BadShape { channels: usize, samples: usize, len: usize },
    #[error("sentence {0} has empty text")]
    EmptyText(String),
    #[error("sample rate must be positive, got {0}")]
    SampleRate(f64),
    #[error("inconsistent channel counts: trial {sentence_id} has {found}, expected {expected}")]
    ChannelMismatch {
        sentence_id: String,
        expected: usize,
        found: usize,
    },
    #[error("unknown test id {0}")]
    UnknownTestId(String),
    #[error("validation count {val_count} leaves no training data ({available} ids available after test)")]
    ValidationTooLarge { val_count: usize, available: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic configuration: {0}")]
    Synthetic(String),
}

/// One sentence-reading trial: a channels x samples matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EegTrial {
    pub subject_id: String,
    pub sentence_id: String,
    pub sample_rate_hz: f64,
    channels: usize,
    samples: usize,
    data: Vec<f32>,
}

impl EegTrial {
    pub fn new(
        subject_id: impl Into<String>,
        sentence_id: impl Into<String>,
        sample_rate_hz: f64,
        channels: usize,
        samples: usize,
        data: Vec<f32>,
    ) -> Result<Self, CorpusError> {
        let sentence_id = sentence_id.into();
        if channels == 0 || samples == 0 || data.len() != channels * samples {
            return Err(CorpusError::BadShape { channels, samples, len: data.len() });
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(CorpusError::SampleRate(sample_rate_hz));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::NonFinite { context: format!("trial {sentence_id}"), index });
        }
        Ok(Self {
            subject_id: subject_id.into(),
            sentence_id,
            sample_rate_hz,
            channels,
            samples,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Row-major channel-by-time values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn get(&self, c: usize, t: usize) -> f32 {
        self.data[c * self.samples + t]
    }

    /// Same trial with new data of identical shape.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { data, ..self.clone() }
    }

    pub(crate) fn reshaped(&self, samples: usize, data: Vec<f32>) -> Self {
        Self { samples, data, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub sentence_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// All trials of one subject, plus the sentences they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCorpus {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub trials: Vec<EegTrial>,
    pub sentences: BTreeMap<String, SentenceRecord>,
    pub split: Option<Split>,
}

impl SubjectCorpus {
    /// Builds and validates a corpus.
    pub fn new(
        subject_id: impl Into<String>,
        sample_rate_hz: f64,
        trials: Vec<EegTrial>,
        sentences: Vec<SentenceRecord>,
    ) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        for s in sentences {
            if s.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(s.sentence_id));
            }
            if map.contains_key(&s.sentence_id) {
                return Err(CorpusError::DuplicateSentenceId(s.sentence_id));
            }
            map.insert(s.sentence_id.clone(), s);
        }
        let corpus = Self {
            subject_id: subject_id.into(),
            sample_rate_hz,
            trials,
            sentences: map,
            split: None,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(CorpusError::SampleRate(self.sample_rate_hz));
        }
        let mut seen = BTreeSet::new();
        for t in &self.trials {
            if !self.sentences.contains_key(&t.sentence_id) {
                return Err(CorpusError::UnknownSentence(t.sentence_id.clone()));
            }
            if !seen.insert(t.sentence_id.as_str()) {
                return Err(CorpusError::DuplicateSentenceId(t.sentence_id.clone()));
            }
        }
        if let Some(split) = &self.split {
            let train: BTreeSet<_> = split.train_ids.iter().collect();
            for id in &split.test_ids {
                if train.contains(id) {
                    return Err(CorpusError::InvalidSplit(format!("{id} is in both train and test")));
                }
            }
            for id in split.train_ids.iter().chain(&split.test_ids) {
                if !self.sentences.contains_key(id) {
                    return Err(CorpusError::InvalidSplit(format!("{id} is not a sentence of this corpus")));
                }
            }
        }
        Ok(())
    }

    /// Sentence ids of all trials, in trial order.
    pub fn trial_ids(&self) -> Vec<String> {
        self.trials.iter().map(|t| t.sentence_id.clone()).collect()
    }

    pub fn trial(&self, sentence_id: &str) -> Option<&EegTrial> {
        self.trials.iter().find(|t| t.sentence_id == sentence_id)
    }

    pub fn text(&self, sentence_id: &str) -> Option<&str> {
        self.sentences.get(sentence_id).map(|s| s.text.as_str())
    }

    /// Longest trial of this subject.
    pub fn max_samples(&self) -> usize {
        self.trials.iter().map(EegTrial::samples).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    subject_id: String,
    sample_rate_hz: f64,
    trials: Vec<ManifestTrial>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestTrial {
    sentence_id: String,
    text: String,
    file: String,
    channels: usize,
    samples: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    excluded: bool,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

/// Reads and validates a corpus directory. Trials marked `excluded` or with an
/// empty declared shape are dropped and counted in the log.
pub fn load_corpus(dir: &Path) -> Result<SubjectCorpus, CorpusError> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|source| CorpusError::Manifest {
        path: manifest_path.display().to_string(),
        source,
    })?;
    if !(manifest.sample_rate_hz > 0.0 && manifest.sample_rate_hz.is_finite()) {
        return Err(CorpusError::SampleRate(manifest.sample_rate_hz));
    }

    let mut trials = Vec::with_capacity(manifest.trials.len());
    let mut sentences = Vec::with_capacity(manifest.trials.len());
    let mut seen = BTreeSet::new();
    let mut dropped = 0usize;
    for entry in &manifest.trials {
        if !seen.insert(entry.sentence_id.clone()) {
            return Err(CorpusError::DuplicateSentenceId(entry.sentence_id.clone()));
        }
        if entry.excluded || entry.channels == 0 || entry.samples == 0 {
            dropped += 1;
            continue;
        }
        let file = dir.join(&entry.file);
        let bytes = match fs::read(&file) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(CorpusError::MissingTrialData {
                    file: file.display().to_string(),
                    sentence_id: entry.sentence_id.clone(),
                })
            }
            Err(e) => return Err(io_err(&file)(e)),
        };
        let expected = entry.channels * entry.samples * 4;
        if bytes.len() != expected {
            return Err(CorpusError::ShapeMismatch {
                file: file.display().to_string(),
                channels: entry.channels,
                samples: entry.samples,
                expected,
                actual: bytes.len(),
            });
        }
        let data = container::f32_from_le(&bytes).expect("length checked above");
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::NonFinite { context: file.display().to_string(), index });
        }
        trials.push(EegTrial::new(
            manifest.subject_id.clone(),
            entry.sentence_id.clone(),
            manifest.sample_rate_hz,
            entry.channels,
            entry.samples,
            data,
        )?);
        sentences.push(SentenceRecord { sentence_id: entry.sentence_id.clone(), text: entry.text.clone() });
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} excluded or incomplete trial(s)", manifest.subject_id);
    }
    let mut corpus = SubjectCorpus::new(manifest.subject_id, manifest.sample_rate_hz, trials, sentences)?;
    corpus.split = manifest.split;
    corpus.validate()?;
    Ok(corpus)
}

/// Writes `corpus` as a corpus directory. Returns the manifest path.
pub fn save_corpus(corpus: &SubjectCorpus, dir: &Path) -> Result<PathBuf, CorpusError> {
    fs::create_dir_all(dir.join("trials")).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(corpus.trials.len());
    for (i, trial) in corpus.trials.iter().enumerate() {
        let file = format!("trials/{i:05}.f32");
        let path = dir.join(&file);
        fs::write(&path, container::f32_to_le(trial.data())).map_err(io_err(&path))?;
        entries.push(ManifestTrial {
            sentence_id: trial.sentence_id.clone(),
            text: corpus.sentences[&trial.sentence_id].text.clone(),
            file,
            channels: trial.channels(),
            samples: trial.samples(),
            excluded: false,
        });
    }
    let manifest = Manifest {
        subject_id: corpus.subject_id.clone(),
        sample_rate_hz: corpus.sample_rate_hz,
        trials: entries,
        split: corpus.split.clone(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest is plain data");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}

/// Zero-pads every trial symmetrically to the subject's longest trial. An odd
/// deficit puts the extra zero at the end.
pub fn pad_symmetric(corpus: &SubjectCorpus) -> Result<SubjectCorpus, CorpusError> {
    let Some(first) = corpus.trials.first() else {
        return Ok(corpus.clone());
    };
    let channels = first.channels();
    for t in &corpus.trials {
        if t.channels() != channels {
            return Err(CorpusError::ChannelMismatch {
                sentence_id: t.sentence_id.clone(),
                expected: channels,
                found: t.channels(),
            });
        }
    }
    let t_max = corpus.max_samples();
    let trials = corpus.trials.iter().map(|t| pad_trial(t, t_max)).collect();
    Ok(SubjectCorpus { trials, ..corpus.clone() })
}

/// Pads one trial to `target` samples (no-op when already that long).
pub fn pad_trial(trial: &EegTrial, target: usize) -> EegTrial {
    let len = trial.samples();
    if len >= target {
        return trial.clone();
    }
    let lead = (target - len) / 2;
    let mut data = vec![0.0f32; trial.channels() * target];
    for c in 0..trial.channels() {
        data[c * target + lead..c * target + lead + len].copy_from_slice(trial.channel(c));
    }
    trial.reshaped(target, data)
}

/// Train / validation / test partition of sentence ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl CorpusSplit {
    /// Training partition including validation, used for final retraining.
    pub fn full_train(&self) -> Vec<String> {
        self.train.iter().chain(&self.validation).cloned().collect()
    }
}

/// Partitions the corpus trials. `test_ids` become the test partition in the
/// given order; `val_count` ids are drawn from the rest with `seed`.
pub fn split_corpus(
    corpus: &SubjectCorpus,
    test_ids: &[String],
    val_count: usize,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    let ids = corpus.trial_ids();
    let present: BTreeSet<&String> = ids.iter().collect();
    let mut test_set = BTreeSet::new();
    for id in test_ids {
        if !present.contains(id) {
            return Err(CorpusError::UnknownTestId(id.clone()));
        }
        if !test_set.insert(id) {
            return Err(CorpusError::InvalidSplit(format!("test id {id} listed twice")));
        }
    }
    let mut rest: Vec<String> = ids.iter().filter(|id| !test_set.contains(id)).cloned().collect();
    if val_count > 0 && val_count >= rest.len() {
        return Err(CorpusError::ValidationTooLarge { val_count, available: rest.len() });
    }
    let mut order: Vec<usize> = (0..rest.len()).collect();
    order.shuffle(&mut seed::named_rng(seed, "split.validation"));
    let val_positions: BTreeSet<usize> = order[..val_count].iter().copied().collect();
    let mut validation = Vec::with_capacity(val_count);
    let mut train = Vec::with_capacity(rest.len() - val_count);
    for (i, id) in rest.drain(..).enumerate() {
        if val_positions.contains(&i) {
            validation.push(id);
        } else {
            train.push(id);
        }
    }
    Ok(CorpusSplit { train, validation, test: test_ids.to_vec() })
}

/// Deterministically picks `count` test ids among `ids` (sorted first, so the
/// choice depends only on the id set). Reusing the result across subjects keeps
/// the test sentences identical for everyone.
pub fn choose_test_ids(ids: &[String], count: usize, seed: u64) -> Result<Vec<String>, CorpusError> {
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if count >= sorted.len() {
        return Err(CorpusError::InvalidSplit(format!(
            "cannot hold out {count} of {} sentences",
            sorted.len()
        )));
    }
    sorted.shuffle(&mut seed::named_rng(seed, "split.test"));
    sorted.truncate(count);
    Ok(sorted)
}
