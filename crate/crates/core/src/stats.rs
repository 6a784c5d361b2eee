//! Paired nonparametric model comparison: the Wilcoxon signed-rank test.
//!
//! Zero differences are discarded (Wilcoxon's original policy). Absolute
//! differences get average ranks on ties; `W` is the smaller signed rank
//! sum. Exact mode enumerates the distribution of the positive rank sum
//! over all 2^n sign assignments by dynamic programming over achievable
//! rank sums (ranks doubled so tied average ranks stay integral); the
//! two-sided p doubles the lower tail and caps at 1. Approximate mode uses
//! the normal approximation with tie correction and a 0.5 continuity
//! correction.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, UqError};

/// Paired per-patient scores of two models.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub labels: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(labels: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.len() != labels.len() || a.is_empty() {
            return Err(UqError::InvalidArg(format!(
                "paired sample needs equal non-zero lengths (labels {}, a {}, b {})",
                labels.len(),
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(UqError::InvalidArg("paired sample values must be finite".into()));
        }
        Ok(PairedSample { labels, a, b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMode {
    Exact,
    NormalApprox,
}

impl std::str::FromStr for WilcoxonMode {
    type Err = UqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(WilcoxonMode::Exact),
            "approx" => Ok(WilcoxonMode::NormalApprox),
            other => Err(UqError::InvalidArg(format!(
                "unknown mode {other:?} (expected exact|approx)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WilcoxonResult {
    /// Smaller of the two signed rank sums (0.5 steps possible under ties).
    pub w: f64,
    /// Pairs remaining after discarding zero differences.
    pub n_eff: usize,
    pub p_two_sided: f64,
    pub mode: WilcoxonMode,
    /// All differences were zero; p is 1.0 by convention.
    pub all_zero: bool,
    /// Exact mode beyond n = 25: permitted, but enumeration cost grows.
    pub large_exact: bool,
}

/// Average ranks of absolute differences (ties share the mean rank).
fn average_ranks(abs_diffs: &[f64]) -> Vec<f64> {
    let n = abs_diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| abs_diffs[i].total_cmp(&abs_diffs[j]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_diffs[order[j + 1]] == abs_diffs[order[i]] {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided exact p for the observed min rank sum `w`, enumerating the
/// realized (possibly tied) rank multiset by DP. Ranks arrive doubled so
/// sums are integers.
fn exact_p(ranks2: &[u64], w2: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    // dp[s] = number of sign assignments with positive rank sum s
    let mut dp = vec![0.0f64; total as usize + 1];
    dp[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        reach += r;
        for s in (r..=reach).rev() {
            dp[s] += dp[s - r];
        }
    }
    let count: f64 = dp[..=(w2 as usize).min(total as usize)].iter().sum();
    let p = 2.0 * count / 2.0f64.powi(ranks2.len() as i32);
    p.min(1.0)
}

/// Wilcoxon signed-rank test over paired scores. Zero differences are
/// discarded; if every difference is zero the result is flagged and p = 1.
pub fn wilcoxon_signed_rank(sample: &PairedSample, mode: WilcoxonMode) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = sample
        .a
        .iter()
        .zip(&sample.b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w: 0.0,
            n_eff: 0,
            p_two_sided: 1.0,
            mode,
            all_zero: true,
            large_exact: false,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let mut w_plus = 0.0f64;
    let mut w_minus = 0.0f64;
    for (d, r) in diffs.iter().zip(&ranks) {
        if *d > 0.0 {
            w_plus += r;
        } else {
            w_minus += r;
        }
    }
    let w = w_plus.min(w_minus);

    let p = match mode {
        WilcoxonMode::Exact => {
            let ranks2: Vec<u64> = ranks.iter().map(|r| (r * 2.0).round() as u64).collect();
            exact_p(&ranks2, (w * 2.0).round() as u64)
        }
        WilcoxonMode::NormalApprox => {
            let nf = n as f64;
            let mu = nf * (nf + 1.0) / 4.0;
            // tie correction: sum over tie groups of (t^3 - t) / 48
            let mut tie_term = 0.0f64;
            let mut sorted = abs.clone();
            sorted.sort_by(f64::total_cmp);
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n && sorted[j + 1] == sorted[i] {
                    j += 1;
                }
                let t = (j - i + 1) as f64;
                tie_term += (t * t * t - t) / 48.0;
                i = j + 1;
            }
            let sigma2 = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
            if sigma2 <= 0.0 {
                1.0
            } else {
                let z = (w - mu + 0.5) / sigma2.sqrt();
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                (2.0 * normal.cdf(z)).min(1.0)
            }
        }
    };
    Ok(WilcoxonResult {
        w,
        n_eff: n,
        p_two_sided: p,
        mode,
        all_zero: false,
        large_exact: mode == WilcoxonMode::Exact && n > 25,
    })
}
