use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{bh_fdr, Analysis, Method, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    /// p < 0.01
    HighlySignificant,
    /// p < 0.05
    Significant,
    /// 0.05 <= p < 0.10
    Borderline,
    NotSignificant,
    /// Every paired difference was zero.
    NoEvidence,
}

impl Significance {
    pub fn classify(p: Option<f64>) -> Self {
        match p {
            None => Self::NoEvidence,
            Some(p) if p < 0.01 => Self::HighlySignificant,
            Some(p) if p < 0.05 => Self::Significant,
            Some(p) if p < 0.10 => Self::Borderline,
            Some(_) => Self::NotSignificant,
        }
    }

    pub fn is_significant(self) -> bool {
        matches!(self, Self::HighlySignificant | Self::Significant)
    }

    fn marker(self) -> &'static str {
        match self {
            Self::HighlySignificant => "**",
            Self::Significant => "*",
            Self::Borderline => "~",
            Self::NotSignificant | Self::NoEvidence => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject_id: String,
    pub n: usize,
    pub real_mu: f64,
    pub real_sigma: f64,
    pub rand_mu: f64,
    pub rand_sigma: f64,
    pub delta: f64,
    /// `None` when the baseline mean is zero.
    pub delta_pct: Option<f64>,
    pub statistic: Option<f64>,
    pub method: Option<Method>,
    pub p_raw: Option<f64>,
    /// Adjusted across subjects; `None` on the dataset row.
    pub p_fdr: Option<f64>,
    /// Subject rows are flagged on `p_fdr`, the dataset row on `p_raw`.
    pub significance: Significance,
}

impl ReportRow {
    fn from_analysis(a: &Analysis, p_fdr: Option<f64>, flag_on_fdr: bool) -> Self {
        let delta = a.real.mean - a.baseline.mean;
        let p_raw = a.p_value();
        Self {
            subject_id: a.label.clone(),
            n: a.real.n,
            real_mu: a.real.mean,
            real_sigma: a.real.std,
            rand_mu: a.baseline.mean,
            rand_sigma: a.baseline.std,
            delta,
            delta_pct: (a.baseline.mean != 0.0).then(|| 100.0 * delta / a.baseline.mean),
            statistic: a.test.as_ref().map(|t| t.statistic),
            method: a.test.as_ref().map(|t| t.method),
            p_raw,
            p_fdr,
            significance: Significance::classify(if flag_on_fdr { p_fdr } else { p_raw }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Real,
    Random,
}

/// Five-number box summary; whiskers are the 1.5·IQR fences clipped to the data range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotEntry {
    pub subject_id: String,
    pub condition: Condition,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub values: Vec<f64>,
}

/// Linear-interpolation quantile of `values` at `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn boxplot(subject_id: &str, condition: Condition, values: Vec<f64>) -> BoxplotEntry {
    let q1 = quantile(&values, 0.25);
    let q3 = quantile(&values, 0.75);
    let iqr = q3 - q1;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    BoxplotEntry {
        subject_id: subject_id.into(),
        condition,
        n: values.len(),
        min,
        q1,
        median: quantile(&values, 0.5),
        q3,
        max,
        whisker_low: (q1 - 1.5 * iqr).max(min),
        whisker_high: (q3 + 1.5 * iqr).min(max),
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_subject: Vec<ReportRow>,
    /// Absent with fewer than two subjects.
    pub whole_dataset: Option<ReportRow>,
    /// Two entries (real, random) per subject with per-sentence scores, then
    /// two for the dataset built from subject means.
    pub boxplot_data: Vec<BoxplotEntry>,
    pub notices: Vec<String>,
}

/// Adjusts subject p-values across subjects and assembles rows and box data.
pub fn build_report(subjects: &[Analysis], dataset: Option<&Analysis>) -> Result<EvalReport, StatsError> {
    let tested: Vec<f64> = subjects.iter().filter_map(|a| a.p_value()).collect();
    let mut adjusted = bh_fdr(&tested)?.into_iter();
    let mut per_subject = Vec::with_capacity(subjects.len());
    let mut boxplot_data = Vec::with_capacity(2 * subjects.len() + 2);
    for a in subjects {
        let p_fdr = a.p_value().map(|_| adjusted.next().expect("one adjusted value per tested subject"));
        per_subject.push(ReportRow::from_analysis(a, p_fdr, true));
        boxplot_data.push(boxplot(&a.label, Condition::Real, a.pairs.iter().map(|p| p.real_score).collect()));
        boxplot_data.push(boxplot(&a.label, Condition::Random, a.pairs.iter().map(|p| p.baseline_score).collect()));
    }
    let mut notices = Vec::new();
    for a in subjects.iter().filter(|a| a.test.is_none()) {
        notices.push(format!("{}: all paired differences are zero, no evidence either way", a.label));
    }
    match dataset {
        Some(d) => {
            boxplot_data.push(boxplot(&d.label, Condition::Real, d.pairs.iter().map(|p| p.real_score).collect()));
            boxplot_data.push(boxplot(&d.label, Condition::Random, d.pairs.iter().map(|p| p.baseline_score).collect()));
        }
        None => notices.push(format!(
            "whole-dataset row omitted: the paired test needs at least 2 subjects, got {}",
            subjects.len()
        )),
    }
    Ok(EvalReport {
        per_subject,
        whole_dataset: dataset.map(|d| ReportRow::from_analysis(d, None, false)),
        boxplot_data,
        notices,
    })
}

fn fmt_p(p: Option<f64>) -> String {
    match p {
        None => "n/a".into(),
        Some(p) if p < 1e-9 => "<1e-9".into(),
        Some(p) if p < 0.001 => format!("{p:.2e}"),
        Some(p) => format!("{p:.4}"),
    }
}

/// Plain-text table: Subj., Real μ±σ, Random μ±σ, Δ, Δ%, p (raw), p (FDR).
/// `**` marks p < 0.01, `*` p < 0.05 and `~` borderline.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>15} {:>15} {:>8} {:>8} {:>10} {:>10}",
        "Subj.", "Real mu±sd", "Random mu±sd", "Delta", "Delta%", "p (raw)", "p (FDR)"
    );
    let line = |out: &mut String, r: &ReportRow| {
        let marked = if r.p_fdr.is_some() { fmt_p(r.p_fdr) } else { fmt_p(r.p_raw) };
        let mark = r.significance.marker();
        let (raw, fdr) = if r.p_fdr.is_some() {
            (fmt_p(r.p_raw), format!("{mark}{marked}"))
        } else {
            (format!("{mark}{marked}"), "-".into())
        };
        let _ = writeln!(
            out,
            "{:<8} {:>15} {:>15} {:>8.3} {:>8} {:>10} {:>10}",
            r.subject_id,
            format!("{:.3}±{:.3}", r.real_mu, r.real_sigma),
            format!("{:.3}±{:.3}", r.rand_mu, r.rand_sigma),
            r.delta,
            r.delta_pct.map_or("n/a".into(), |d| format!("{d:.2}")),
            raw,
            fdr
        );
    };
    for r in &report.per_subject {
        line(&mut out, r);
    }
    if let Some(r) = &report.whole_dataset {
        line(&mut out, r);
    }
    for n in &report.notices {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

pub fn boxplot_csv(report: &EvalReport) -> String {
    let mut out = String::from("subject_id,condition,n,min,whisker_low,q1,median,q3,whisker_high,max\n");
    for b in &report.boxplot_data {
        let cond = match b.condition {
            Condition::Real => "real",
            Condition::Random => "random",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            b.subject_id, cond, b.n, b.min, b.whisker_low, b.q1, b.median, b.q3, b.whisker_high, b.max
        );
    }
    out
}
