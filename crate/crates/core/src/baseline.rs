//! Temporal-permutation baseline.
//!
//! Each test trial has its time samples shuffled, and the shuffled trials are
//! reassigned to the test labels by a random permutation. Runs are repeated
//! over seeds and decoded through the same [`Decoder`] as real trials.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::EegTrial;
use crate::decode::{score, AuditLog, Decoded, DecodeError, Decoder, GroundTruth, Stage};
use crate::seed;
use crate::stats::ScoreRecord;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("n_seeds must be at least 1")]
    NoSeeds,
    #[error("{trials} trials but {ids} test ids")]
    SizeMismatch { trials: usize, ids: usize },
    #[error("baseline seed {seed}: {source}")]
    Run { seed: u64, source: DecodeError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub seed_base: u64,
    /// Permute each channel independently instead of whole time columns.
    #[serde(default)]
    pub per_channel: bool,
}

fn default_seeds() -> usize {
    10
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { n_seeds: default_seeds(), seed_base: 0, per_channel: false }
    }
}

/// Applies one random time permutation to all channels.
pub fn shuffle_temporal(trial: &EegTrial, seed: u64) -> EegTrial {
    let (c, t) = (trial.channels(), trial.samples());
    let mut perm: Vec<usize> = (0..t).collect();
    perm.shuffle(&mut seed::rng(seed));
    let src = trial.data();
    let mut data = vec![0.0f32; c * t];
    for ch in 0..c {
        for (j, &p) in perm.iter().enumerate() {
            data[ch * t + j] = src[ch * t + p];
        }
    }
    trial.with_data(data)
}

/// Shuffles each channel with its own permutation.
pub fn shuffle_temporal_per_channel(trial: &EegTrial, seed: u64) -> EegTrial {
    let t = trial.samples();
    let mut rng = seed::rng(seed);
    let mut data = trial.data().to_vec();
    for row in data.chunks_exact_mut(t) {
        row.shuffle(&mut rng);
    }
    trial.with_data(data)
}

/// Mean over channels of the lag-1 autocorrelation; constant channels count as 0.
pub fn lag1_autocorrelation(trial: &EegTrial) -> f64 {
    let c = trial.channels();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = trial.channel(ch).iter().map(|v| *v as f64).collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        if var > 0.0 {
            let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
            total += cov / var;
        }
    }
    total / c as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    pub seed: u64,
    pub shuffled_trials: Vec<EegTrial>,
    /// Label scored against `shuffled_trials[i]`.
    pub label_assignment: Vec<String>,
}

pub fn make_baseline_runs(
    test_trials: &[EegTrial],
    test_ids: &[String],
    bc: &BaselineConfig,
) -> Result<Vec<BaselineRun>, BaselineError> {
    if bc.n_seeds == 0 {
        return Err(BaselineError::NoSeeds);
    }
    if test_trials.len() != test_ids.len() {
        return Err(BaselineError::SizeMismatch { trials: test_trials.len(), ids: test_ids.len() });
    }
    Ok((0..bc.n_seeds as u64)
        .map(|i| {
            let run_seed = bc.seed_base + i;
            let shuffled_trials = test_trials
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let s = seed::child(seed::substream(run_seed, "baseline.shuffle"), j as u64);
                    if bc.per_channel {
                        shuffle_temporal_per_channel(t, s)
                    } else {
                        shuffle_temporal(t, s)
                    }
                })
                .collect();
            let mut label_assignment = test_ids.to_vec();
            label_assignment.shuffle(&mut seed::named_rng(run_seed, "baseline.labels"));
            BaselineRun { seed: run_seed, shuffled_trials, label_assignment }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub decoded: Vec<(u64, Decoded)>,
    pub scores: Vec<ScoreRecord>,
}

/// Decodes every run, then scores all outputs against their assigned labels.
pub fn run_baseline(
    runs: &[BaselineRun],
    decoder: &Decoder<'_>,
    truth: &GroundTruth,
    subject_id: Option<&str>,
    audit: &mut AuditLog,
) -> Result<BaselineOutcome, BaselineError> {
    let mut decoded = Vec::new();
    for run in runs {
        for (trial, label) in run.shuffled_trials.iter().zip(&run.label_assignment) {
            let d = decoder.decode(label, trial, audit).map_err(|source| BaselineError::Run { seed: run.seed, source })?;
            decoded.push((run.seed, d));
        }
    }
    if audit.stage() != Stage::Scoring {
        audit.enter(Stage::Scoring);
    }
    let mut scores = Vec::with_capacity(decoded.len());
    for (seed, d) in &decoded {
        let cosine = score(d, truth, audit).map_err(|source| BaselineError::Run { seed: *seed, source })?;
        scores.push(ScoreRecord {
            subject_id: subject_id.map(str::to_string),
            sentence_id: d.label.clone(),
            cosine,
            seed: Some(*seed),
        });
    }
    Ok(BaselineOutcome { decoded, scores })
}
