//! Percentiles and empirical CDFs over latency samples.
//!
//! Percentiles interpolate linearly between the two closest ranks: the p-th
//! percentile of sorted `x[0..n]` sits at fractional rank `p/100 * (n-1)`.

use serde::{Deserialize, Serialize};

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Percentile of already sorted samples; `None` when empty.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    percentile_sorted(&sorted(values), p)
}

pub fn percentiles(values: &[f64], ps: &[f64]) -> Vec<Option<f64>> {
    let s = sorted(values);
    ps.iter().map(|&p| percentile_sorted(&s, p)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PercentileSummary {
    pub count: usize,
    pub mean: f64,
    pub p25: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

/// Summary of `values`; all zeros when empty.
pub fn summarize(values: &[f64]) -> PercentileSummary {
    let s = sorted(values);
    if s.is_empty() {
        return PercentileSummary::default();
    }
    let at = |p| percentile_sorted(&s, p).expect("non-empty");
    PercentileSummary {
        count: s.len(),
        mean: s.iter().sum::<f64>() / s.len() as f64,
        p25: at(25.0),
        p50: at(50.0),
        p95: at(95.0),
        max: s[s.len() - 1],
    }
}

/// Empirical CDF as `(value, cumulative_fraction)` steps, one per distinct
/// value.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let s = sorted(values);
    let n = s.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in s.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}
