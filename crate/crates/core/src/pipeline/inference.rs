use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{to_json_pretty, write_file, ExperimentConfig, OfflineArtifacts, PipelineError};
use crate::baseline::{make_baseline_runs, run_baseline};
use crate::corpus::{pad_trial, EegTrial, SubjectCorpus};
use crate::decode::{score, AuditLog, Decoded, Decoder, GroundTruth, Stage};
use crate::embedding::make_provider;
use crate::refine::make_client;
use crate::stats::{group_scores, subject_analysis, Analysis, ScoreRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub ground_truth_accesses_before_scoring: usize,
    pub ground_truth_accesses_during_scoring: usize,
    /// Test ids whose text reached the refiner.
    pub refiner_visible_test_ids: Vec<String>,
    /// Retrieved texts identical to some test sentence (possible with duplicated sentences).
    pub refiner_visible_test_texts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceHashes {
    pub decoded: String,
    pub scores_real: String,
    pub scores_baseline: String,
}

#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    pub subject_id: String,
    pub decoded: Vec<Decoded>,
    pub real_scores: Vec<ScoreRecord>,
    pub baseline_scores: Vec<ScoreRecord>,
    pub analysis: Analysis,
    pub audit: AuditLog,
    pub audit_summary: AuditSummary,
    pub hashes: InferenceHashes,
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        writeln!(out).expect("vec write");
    }
    out
}

/// Decodes every test trial and its temporal-permutation surrogates through
/// one [`Decoder`], then scores them. Ground truth is read only after all
/// generation has finished.
pub fn run_inference(
    config: &ExperimentConfig,
    corpus: &SubjectCorpus,
    artifacts: &OfflineArtifacts,
    dir: &Path,
) -> Result<InferenceOutcome, PipelineError> {
    let subject = corpus.subject_id.as_str();
    let stage = |name: &'static str| move |e: String| PipelineError::stage(name, subject, e);
    let split = artifacts.manifest.split.as_ref().ok_or_else(|| stage("verify")("manifest lacks split".into()))?;
    let samples = artifacts.manifest.input_samples;

    let mut test_trials: Vec<EegTrial> = Vec::with_capacity(split.test.len());
    for id in &split.test {
        let trial = corpus.trial(id).ok_or_else(|| stage("inference")(format!("test id {id} missing from corpus")))?;
        if trial.samples() > samples {
            return Err(stage("inference")(format!("trial {id} longer than the model input ({samples})")));
        }
        test_trials.push(pad_trial(trial, samples));
    }
    let truth_items = split
        .test
        .iter()
        .map(|id| {
            let e = artifacts.targets.get(id).ok_or_else(|| stage("inference")(format!("no target embedding for {id}")))?;
            Ok((id.clone(), (corpus.text(id).unwrap_or_default().to_string(), e.clone())))
        })
        .collect::<Result<BTreeMap<_, _>, PipelineError>>()?;
    let truth = GroundTruth::new(truth_items);

    let provider = make_provider(&config.embedding).map_err(|e| stage("embed")(e.to_string()))?;
    let refiner = make_client(&config.refiner).map_err(|e| stage("refine")(e.to_string()))?;
    let decoder = Decoder {
        model: &artifacts.model,
        store: &artifacts.store,
        refiner: refiner.as_ref(),
        provider: provider.as_ref(),
        k: config.k,
        retries: config.refiner.retries,
        prompt_template: config.refiner.prompt_template.clone(),
    };

    let mut audit = AuditLog::default();
    let mut decoded = Vec::with_capacity(test_trials.len());
    for (id, trial) in split.test.iter().zip(&test_trials) {
        decoded.push(decoder.decode(id, trial, &mut audit).map_err(|e| stage("inference")(e.to_string()))?);
    }
    let runs = make_baseline_runs(&test_trials, &split.test, &config.baseline_config())
        .map_err(|e| stage("baseline")(e.to_string()))?;
    let baseline = run_baseline(&runs, &decoder, &truth, Some(subject), &mut audit)
        .map_err(|e| stage("baseline")(e.to_string()))?;
    if audit.stage() != Stage::Scoring {
        audit.enter(Stage::Scoring);
    }
    let mut real_scores = Vec::with_capacity(decoded.len());
    for d in &decoded {
        let cosine = score(d, &truth, &mut audit).map_err(|e| stage("inference")(e.to_string()))?;
        real_scores.push(ScoreRecord { subject_id: Some(subject.into()), sentence_id: d.label.clone(), cosine, seed: None });
    }

    let test_ids: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
    let visible = audit.refiner_visible();
    let test_texts = truth.texts();
    let visible_texts = decoded
        .iter()
        .chain(baseline.decoded.iter().map(|(_, d)| d))
        .flat_map(|d| d.retrieved.iter())
        .filter(|h| test_texts.contains(h.text.as_str()))
        .count();
    let summary = AuditSummary {
        ground_truth_accesses_before_scoring: audit.ground_truth_accesses(Stage::Generation),
        ground_truth_accesses_during_scoring: audit.ground_truth_accesses(Stage::Scoring),
        refiner_visible_test_ids: visible.intersection(&test_ids).map(|s| s.to_string()).collect(),
        refiner_visible_test_texts: visible_texts,
    };
    if visible_texts > 0 {
        log::warn!("{subject}: {visible_texts} retrieved candidates duplicate a test sentence text");
    }
    if !summary.refiner_visible_test_ids.is_empty() || summary.ground_truth_accesses_before_scoring > 0 {
        return Err(stage("audit")(format!("leakage detected: {summary:?}")));
    }

    let hashes = InferenceHashes {
        decoded: write_file(&dir.join("decoded.jsonl"), &jsonl(&decoded), "write", subject)?,
        scores_real: write_file(&dir.join("scores_real.jsonl"), &jsonl(&real_scores), "write", subject)?,
        scores_baseline: write_file(&dir.join("scores_baseline.jsonl"), &jsonl(&baseline.scores), "write", subject)?,
    };
    #[derive(Serialize)]
    struct AuditFile<'a> {
        summary: &'a AuditSummary,
        log: &'a AuditLog,
    }
    write_file(&dir.join("audit.json"), &to_json_pretty(&AuditFile { summary: &summary, log: &audit }), "write", subject)?;

    let grouped = group_scores(&real_scores, &baseline.scores, subject).map_err(|e| stage("stats")(e.to_string()))?;
    let g = grouped.into_iter().next().ok_or_else(|| stage("stats")("no scores".into()))?;
    let analysis = subject_analysis(subject, &g.real, &g.baseline).map_err(|e| stage("stats")(e.to_string()))?;
    Ok(InferenceOutcome {
        subject_id: subject.into(),
        decoded,
        real_scores,
        baseline_scores: baseline.scores,
        analysis,
        audit,
        audit_summary: summary,
        hashes,
    })
}
