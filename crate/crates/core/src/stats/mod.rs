//! Scoring and hypothesis testing.
//!
//! Subject-level analysis pairs per-sentence real scores with seed-averaged
//! baseline scores. Dataset-level analysis pairs one mean per subject. Both use
//! a one-sided signed-rank test of "real > baseline".

mod report;
mod wilcoxon;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;

pub use report::{
    boxplot_csv, build_report, quantile, render_table, BoxplotEntry, Condition, EvalReport, ReportRow, Significance,
};
pub use wilcoxon::{average_ranks, wilcoxon_one_sided, wilcoxon_with, Method, TestResult, ZeroHandling, EXACT_MAX_N};

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("degenerate sample: all differences are zero")]
    Degenerate,
    #[error("non-finite value in sample")]
    NonFinite,
    #[error("p-value {0} outside [0, 1]")]
    PValueRange(f64),
    #[error("unpaired sentence ids: {0}")]
    Unpaired(String),
    #[error("duplicate score for {0}")]
    Duplicate(String),
    #[error("dataset analysis needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("empty sample")]
    Empty,
    #[error("score {score} for {label} outside [-1, 1]")]
    ScoreRange { label: String, score: f64 },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed score file {path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

/// `a·b / (|a||b|)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, StatsError> {
    if a.dim() != b.dim() {
        return Err(StatsError::Dimension(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(StatsError::ZeroNorm);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { n, mean, std })
    }
}

/// Benjamini-Hochberg step-up adjustment; output follows input order.
pub fn bh_fdr(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::PValueRange(p));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        // m / rank >= 1; the max keeps rounding from pushing a value below its raw p.
        let scaled = (p_values[i] * (m as f64 / (pos + 1) as f64)).max(p_values[i]);
        running = running.min(scaled);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub label: String,
    pub real_score: f64,
    pub baseline_score: f64,
}

impl PairedSample {
    fn check(&self) -> Result<(), StatsError> {
        for score in [self.real_score, self.baseline_score] {
            if !score.is_finite() {
                return Err(StatsError::NonFinite);
            }
            if !(-1.0..=1.0).contains(&score) {
                return Err(StatsError::ScoreRange { label: self.label.clone(), score });
            }
        }
        Ok(())
    }
}

/// Outcome of a paired comparison. `test` is `None` when every difference is
/// zero, which the report renders as "no evidence".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub label: String,
    pub real: Summary,
    pub baseline: Summary,
    pub test: Option<TestResult>,
    pub pairs: Vec<PairedSample>,
}

impl Analysis {
    pub fn delta(&self) -> f64 {
        self.real.mean - self.baseline.mean
    }

    pub fn p_value(&self) -> Option<f64> {
        self.test.as_ref().map(|t| t.p_value)
    }
}

fn analyse(label: &str, pairs: Vec<PairedSample>) -> Result<Analysis, StatsError> {
    for p in &pairs {
        p.check()?;
    }
    let real: Vec<f64> = pairs.iter().map(|p| p.real_score).collect();
    let base: Vec<f64> = pairs.iter().map(|p| p.baseline_score).collect();
    let diffs: Vec<f64> = pairs.iter().map(|p| p.real_score - p.baseline_score).collect();
    let test = match wilcoxon_one_sided(&diffs) {
        Ok(t) => Some(t),
        Err(StatsError::Degenerate) => None,
        Err(e) => return Err(e),
    };
    Ok(Analysis { label: label.into(), real: Summary::of(&real)?, baseline: Summary::of(&base)?, test, pairs })
}

/// Per-sentence comparison for one subject. Both maps are keyed by sentence id
/// and must cover the same ids; baseline scores are already seed-averaged.
pub fn subject_analysis(
    subject_id: &str,
    real: &BTreeMap<String, f64>,
    baseline: &BTreeMap<String, f64>,
) -> Result<Analysis, StatsError> {
    let real_ids: BTreeSet<&String> = real.keys().collect();
    let base_ids: BTreeSet<&String> = baseline.keys().collect();
    if real_ids != base_ids {
        let diff: Vec<&str> = real_ids.symmetric_difference(&base_ids).map(|s| s.as_str()).collect();
        return Err(StatsError::Unpaired(diff.join(", ")));
    }
    let pairs = real
        .iter()
        .map(|(id, &r)| PairedSample { label: id.clone(), real_score: r, baseline_score: baseline[id] })
        .collect();
    analyse(subject_id, pairs)
}

/// One paired observation per subject (real mean vs baseline mean).
pub fn dataset_analysis(per_subject: &[PairedSample]) -> Result<Analysis, StatsError> {
    if per_subject.len() < 2 {
        return Err(StatsError::TooFewSubjects(per_subject.len()));
    }
    analyse("ALL", per_subject.to_vec())
}

/// One line of a scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    pub sentence_id: String,
    pub cosine: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<(), StatsError> {
    let io = |source| StatsError::Io { path: path.display().to_string(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("score records serialize");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, StatsError> {
    let io = |source| StatsError::Io { path: path.display().to_string(), source };
    let f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| StatsError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Scores of one subject keyed by sentence id: real, and baseline averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectScores {
    pub subject_id: String,
    pub real: BTreeMap<String, f64>,
    pub baseline: BTreeMap<String, f64>,
}

/// Groups score records by subject (missing subject ids fall back to
/// `default_subject`) and averages baseline scores per sentence across seeds.
pub fn group_scores(
    real: &[ScoreRecord],
    baseline: &[ScoreRecord],
    default_subject: &str,
) -> Result<Vec<SubjectScores>, StatsError> {
    let subject = |r: &ScoreRecord| r.subject_id.clone().unwrap_or_else(|| default_subject.to_string());
    let mut real_by: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in real {
        if real_by.entry(subject(r)).or_default().insert(r.sentence_id.clone(), r.cosine).is_some() {
            return Err(StatsError::Duplicate(format!("{}/{}", subject(r), r.sentence_id)));
        }
    }
    let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in baseline {
        if !seen.insert((subject(r), r.sentence_id.clone(), r.seed)) {
            return Err(StatsError::Duplicate(format!("{}/{} seed {:?}", subject(r), r.sentence_id, r.seed)));
        }
        let e = sums.entry(subject(r)).or_default().entry(r.sentence_id.clone()).or_insert((0.0, 0));
        e.0 += r.cosine;
        e.1 += 1;
    }
    let subjects: BTreeSet<&String> = real_by.keys().chain(sums.keys()).collect();
    subjects
        .into_iter()
        .map(|s| {
            let real = real_by.get(s).cloned().unwrap_or_default();
            let baseline: BTreeMap<String, f64> = sums
                .get(s)
                .map(|m| m.iter().map(|(id, (sum, n))| (id.clone(), sum / *n as f64)).collect())
                .unwrap_or_default();
            if real.is_empty() || baseline.is_empty() {
                return Err(StatsError::Unpaired(format!("subject {s} has scores in only one condition")));
            }
            Ok(SubjectScores { subject_id: s.clone(), real, baseline })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let v = EmbeddingVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let w = EmbeddingVector::new(vec![-1.0, -2.0, -3.0]).unwrap();
        let o = EmbeddingVector::new(vec![3.0, 0.0, -1.0]).unwrap();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&v, &w).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&v, &o).unwrap().abs() < 1e-12);
        let z = EmbeddingVector::new(vec![0.0; 3]).unwrap();
        assert!(matches!(cosine_similarity(&v, &z), Err(StatsError::ZeroNorm)));
    }

    #[test]
    fn bh_basics() {
        assert_eq!(bh_fdr(&[0.3]).unwrap(), vec![0.3]);
        assert_eq!(bh_fdr(&[]).unwrap(), Vec::<f64>::new());
        assert!(bh_fdr(&[1.2]).is_err());
        let adj = bh_fdr(&[0.04, 0.001, 0.5]).unwrap();
        for (a, e) in adj.iter().zip([0.06, 0.003, 0.5]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[0.2]).unwrap().std, 0.0);
    }

    #[test]
    fn subject_analysis_pairing() {
        let real: BTreeMap<String, f64> = [("a".into(), 0.5), ("b".into(), 0.4)].into();
        let missing: BTreeMap<String, f64> = [("a".into(), 0.1)].into();
        assert!(matches!(subject_analysis("S", &real, &missing), Err(StatsError::Unpaired(_))));
        let same = subject_analysis("S", &real, &real).unwrap();
        assert!(same.test.is_none());
    }

    #[test]
    fn grouping_averages_over_seeds() {
        let rec = |s: &str, id: &str, c: f64, seed: Option<u64>| ScoreRecord {
            subject_id: Some(s.into()),
            sentence_id: id.into(),
            cosine: c,
            seed,
        };
        let real = vec![rec("A", "x", 0.5, None), rec("A", "y", 0.4, None)];
        let base = vec![rec("A", "x", 0.1, Some(0)), rec("A", "x", 0.3, Some(1)), rec("A", "y", 0.2, Some(0))];
        let g = group_scores(&real, &base, "S").unwrap();
        assert_eq!(g.len(), 1);
        assert!((g[0].baseline["x"] - 0.2).abs() < 1e-12);
        let dup = vec![rec("A", "x", 0.1, Some(0)), rec("A", "x", 0.3, Some(0))];
        assert!(matches!(group_scores(&real, &dup, "S"), Err(StatsError::Duplicate(_))));
    }
}
