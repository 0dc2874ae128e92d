//! End-to-end orchestration: offline training, inference, baseline, report.
//!
//! Layout of an experiment output directory:
//!
//! ```text
//! <out>/manifest.json           run manifest (config, hashes, timestamps)
//! <out>/report.json             EvalReport
//! <out>/report.txt              rendered table
//! <out>/boxplot.csv
//! <out>/<subject>/offline.json  offline-stage manifest
//! <out>/<subject>/embeddings.bin, encoder.bin, store.bin, grid.json
//! <out>/<subject>/decoded.jsonl, scores_real.jsonl, scores_baseline.jsonl, audit.json
//! ```

mod inference;
mod offline;
mod plots;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::container::sha256_hex;
use crate::corpus::{load_corpus, SubjectCorpus};
use crate::embedding::ProviderConfig;
use crate::encoder::GridPoint;
use crate::encoder::{EncoderConfig, TrainConfig};
use crate::refine::{ClientConfig, DEFAULT_K};
use crate::stats::{build_report, dataset_analysis, render_table, boxplot_csv, EvalReport, PairedSample};

pub use inference::{run_inference, InferenceOutcome};
pub use offline::{load_offline_artifacts, run_offline, OfflineArtifacts, OfflineManifest};
pub use plots::{emit_plots, line_style, PlotFiles};

/// JSON Schema for `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("stage {stage}{}: {message}", subject.as_ref().map(|s| format!(" (subject {s})")).unwrap_or_default())]
    Stage { stage: &'static str, subject: Option<String>, message: String },
}

impl PipelineError {
    pub(crate) fn stage(stage: &'static str, subject: &str, e: impl std::fmt::Display) -> Self {
        Self::Stage { stage, subject: Some(subject.into()), message: e.to_string() }
    }

    /// Process exit code: 1 for invalid input, 2 for a failed stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Stage { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: Vec<GridPoint>,
    #[serde(default = "default_grid_seeds")]
    pub seeds: Vec<u64>,
}

fn default_grid_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Everything a run depends on. `train.seed` is replaced by a value derived
/// from `seed`, so the global seed is the only randomness knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// A corpus directory, or a directory of per-subject corpus directories.
    pub corpus_path: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_provider")]
    pub embedding: ProviderConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    #[serde(default = "default_validation_count")]
    pub validation_count: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub refiner: ClientConfig,
}

fn default_provider() -> ProviderConfig {
    ProviderConfig::offline(0)
}
fn default_test_count() -> usize {
    50
}
fn default_validation_count() -> usize {
    50
}
fn default_k() -> usize {
    DEFAULT_K
}

impl ExperimentConfig {
    pub fn new(corpus_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus_path: corpus_path.into(),
            output_dir: output_dir.into(),
            seed: 0,
            embedding: default_provider(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            grid: None,
            test_count: default_test_count(),
            validation_count: default_validation_count(),
            k: default_k(),
            baseline: BaselineConfig::default(),
            refiner: ClientConfig::offline(),
        }
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        if !self.corpus_path.is_dir() {
            return bad(format!("corpus_path {} is not a directory", self.corpus_path.display()));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.test_count == 0 {
            return bad("test_count must be at least 1".into());
        }
        if self.baseline.n_seeds == 0 {
            return bad("baseline.n_seeds must be at least 1".into());
        }
        if let Some(grid) = &self.grid {
            if grid.points.is_empty() || grid.seeds.is_empty() {
                return bad("grid needs at least one point and one seed".into());
            }
            if self.validation_count == 0 {
                return bad("grid search needs validation_count > 0".into());
            }
        }
        if !self.refiner.prompt_template.contains("{sentences}") {
            return bad("refiner.prompt_template lacks {sentences}".into());
        }
        if let Some(p) = &self.refiner.transcript {
            if !p.is_file() {
                return bad(format!("refiner transcript {} not found", p.display()));
            }
        }
        self.train.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        Ok(())
    }

    pub(crate) fn train_seed(&self) -> u64 {
        crate::seed::substream(self.seed, "train")
    }

    pub(crate) fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            seed_base: crate::seed::substream(self.seed, "baseline").wrapping_add(self.baseline.seed_base),
            ..self.baseline
        }
    }
}

/// Loads one corpus, or every subdirectory that holds a corpus manifest
/// (sorted by name).
pub fn load_subjects(corpus_path: &Path) -> Result<Vec<SubjectCorpus>, PipelineError> {
    let load = |dir: &Path| load_corpus(dir).map_err(|e| PipelineError::Validation(e.to_string()));
    if corpus_path.join("manifest.json").is_file() {
        return Ok(vec![load(corpus_path)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(corpus_path)
        .map_err(|e| PipelineError::Validation(format!("{}: {e}", corpus_path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(PipelineError::Validation(format!("no corpus found under {}", corpus_path.display())));
    }
    let subjects = dirs.iter().map(|d| load(d)).collect::<Result<Vec<_>, _>>()?;
    let mut ids = std::collections::BTreeSet::new();
    for s in &subjects {
        if !ids.insert(&s.subject_id) {
            return Err(PipelineError::Validation(format!("subject id {} appears twice", s.subject_id)));
        }
    }
    Ok(subjects)
}

/// Per-subject artifact hashes recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectHashes {
    pub corpus: String,
    pub embeddings: String,
    pub model: String,
    pub store: String,
    pub scores_real: String,
    pub scores_baseline: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: ExperimentConfig,
    pub subjects: BTreeMap<String, SubjectHashes>,
    pub report: String,
}

/// Outcome of [`run_full_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub report_hash: String,
    pub manifest: RunManifest,
    pub subjects: Vec<InferenceOutcome>,
}

pub(crate) fn write_file(path: &Path, bytes: &[u8], stage: &'static str, subject: &str) -> Result<String, PipelineError> {
    std::fs::write(path, bytes).map_err(|e| PipelineError::stage(stage, subject, format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(bytes))
}

pub(crate) fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

/// Canonical bytes of `report.json`; contains no timestamps.
pub fn report_bytes(report: &EvalReport) -> Vec<u8> {
    to_json_pretty(report)
}

/// Offline stage, inference, baseline and statistics for every subject.
pub fn run_full_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, PipelineError> {
    config.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let subjects = load_subjects(&config.corpus_path)?;
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| PipelineError::Validation(format!("{}: {e}", config.output_dir.display())))?;
    if let Some(path) = &config.refiner.record {
        // Every subject appends to one transcript per run.
        std::fs::write(path, b"").map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
    }

    let mut outcomes = Vec::with_capacity(subjects.len());
    let mut hashes = BTreeMap::new();
    for corpus in &subjects {
        let dir = config.output_dir.join(&corpus.subject_id);
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::stage("write", &corpus.subject_id, e))?;
        run_offline(config, corpus, &dir)?;
        let artifacts = load_offline_artifacts(&dir)?;
        let outcome = run_inference(config, corpus, &artifacts, &dir)?;
        hashes.insert(
            corpus.subject_id.clone(),
            SubjectHashes {
                corpus: artifacts.manifest.hashes.corpus.clone(),
                embeddings: artifacts.manifest.hashes.embeddings.clone(),
                model: artifacts.manifest.hashes.model.clone(),
                store: artifacts.manifest.hashes.store.clone(),
                scores_real: outcome.hashes.scores_real.clone(),
                scores_baseline: outcome.hashes.scores_baseline.clone(),
            },
        );
        outcomes.push(outcome);
    }

    let analyses: Vec<_> = outcomes.iter().map(|o| o.analysis.clone()).collect();
    let dataset = if analyses.len() >= 2 {
        let pairs: Vec<PairedSample> = analyses
            .iter()
            .map(|a| PairedSample { label: a.label.clone(), real_score: a.real.mean, baseline_score: a.baseline.mean })
            .collect();
        Some(dataset_analysis(&pairs).map_err(|e| PipelineError::Stage {
            stage: "stats",
            subject: None,
            message: e.to_string(),
        })?)
    } else {
        None
    };
    let report = build_report(&analyses, dataset.as_ref())
        .map_err(|e| PipelineError::Stage { stage: "stats", subject: None, message: e.to_string() })?;
    let out = &config.output_dir;
    let report_hash = write_file(&out.join("report.json"), &report_bytes(&report), "write", "ALL")?;
    write_file(&out.join("report.txt"), render_table(&report).as_bytes(), "write", "ALL")?;
    write_file(&out.join("boxplot.csv"), boxplot_csv(&report).as_bytes(), "write", "ALL")?;

    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        config: config.clone(),
        subjects: hashes,
        report: report_hash.clone(),
    };
    write_file(&out.join("manifest.json"), &to_json_pretty(&manifest), "write", "ALL")?;
    Ok(ExperimentOutcome { report, report_hash, manifest, subjects: outcomes })
}
