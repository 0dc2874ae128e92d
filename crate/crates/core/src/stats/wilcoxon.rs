use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::StatsError;

/// Largest effective sample size that uses exact enumeration.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZeroHandling {
    /// Drop zero differences before ranking.
    #[default]
    Wilcox,
    /// Rank zeros with the rest, then discard their ranks.
    Pratt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// W-, the sum of ranks of negative differences.
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub method: Method,
    pub alternative: String,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One-sided signed-rank test of "differences are shifted above zero".
pub fn wilcoxon_one_sided(diffs: &[f64]) -> Result<TestResult, StatsError> {
    wilcoxon_with(diffs, ZeroHandling::Wilcox)
}

pub fn wilcoxon_with(diffs: &[f64], zeros: ZeroHandling) -> Result<TestResult, StatsError> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let kept: Vec<f64> = match zeros {
        ZeroHandling::Wilcox => diffs.iter().copied().filter(|d| *d != 0.0).collect(),
        ZeroHandling::Pratt => diffs.to_vec(),
    };
    let abs: Vec<f64> = kept.iter().map(|d| d.abs()).collect();
    let all_ranks = average_ranks(&abs);
    let (signs, ranks): (Vec<f64>, Vec<f64>) =
        kept.iter().zip(&all_ranks).filter(|(d, _)| **d != 0.0).map(|(d, r)| (*d, *r)).unzip();
    let n = ranks.len();
    if n == 0 {
        return Err(StatsError::Degenerate);
    }
    let w_minus: f64 = signs.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();

    let (p, method) = if n <= EXACT_MAX_N {
        (exact_lower_tail(&ranks, w_minus), Method::Exact)
    } else {
        (normal_lower_tail(&ranks, w_minus), Method::NormalApprox)
    };
    Ok(TestResult {
        statistic: w_minus,
        p_value: p.clamp(0.0, 1.0),
        n_effective: n,
        method,
        alternative: "greater".into(),
    })
}

/// P(W <= w) when each rank independently joins W with probability 1/2.
/// Average ranks are multiples of 1/2, so the sums are counted on doubled ranks.
fn exact_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let target = (w * 2.0).round() as usize;
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let hits: u64 = counts[..=target.min(total)].iter().sum();
    hits as f64 / 2f64.powi(ranks.len() as i32)
}

fn normal_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return if w < mean { 0.0 } else { 1.0 };
    }
    let z = (w - mean + 0.5) / var.sqrt();
    Normal::standard().cdf(z)
}
