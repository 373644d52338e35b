//! Wilcoxon signed-rank test with the normal approximation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub w: f64,
    pub z: f64,
    /// `(W+ - n(n+1)/4) / sd`; positive when `a` tends to exceed `b`.
    pub z_plus: f64,
    pub p_two_sided: f64,
}

/// Average ranks of `values` (1-based), ties sharing the mean of their ranks.
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
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank sums of positive and negative differences `a - b` after zero removal.
pub fn signed_rank_sums(a: &[f64], b: &[f64]) -> Result<(usize, f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Err(Error::UndefinedTest("all paired differences are zero".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite paired difference".into()));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w_minus = d.iter().zip(&ranks).filter(|(v, _)| **v < 0.0).map(|(_, r)| r).sum();
    Ok((d.len(), w_plus, w_minus))
}

fn test(a: &[f64], b: &[f64], continuity: f64) -> Result<WilcoxonResult> {
    let (n, w_plus, w_minus) = signed_rank_sums(a, b)?;
    let nf = n as f64;
    let w = w_plus.min(w_minus);
    let mean = nf * (nf + 1.0) / 4.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0).sqrt();
    let z = ((w - mean + continuity).min(0.0)) / sd;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * normal.cdf(z)).min(1.0);
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        w,
        z,
        z_plus: (w_plus - mean) / sd,
        p_two_sided: p,
    })
}

/// `z = (W - n(n+1)/4) / sqrt(n(n+1)(2n+1)/24)` with `W = min(W+, W-)`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    test(a, b, 0.0)
}

/// Same statistic with a 0.5 continuity correction toward the mean.
pub fn wilcoxon_signed_rank_corrected(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    test(a, b, 0.5)
}
