//! Paired Wilcoxon signed-rank test.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 20;
pub const MIN_N: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive differences `x − y`.
    pub w: f64,
    /// Number of non-zero differences.
    pub n: usize,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Non-zero differences and their mid-ranks by absolute value.
fn signed_ranks(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} vs {} paired samples", x.len(), y.len())));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Err(Error::DegenerateSample);
    }
    if d.len() < MIN_N {
        return Err(Error::InsufficientData(format!(
            "{} non-zero differences, at least {MIN_N} needed",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && d[order[end]].abs() == d[order[start]].abs() {
            end += 1;
        }
        let mid = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mid;
        }
        start = end;
    }
    Ok((d, ranks))
}

fn w_plus(d: &[f64], ranks: &[f64]) -> f64 {
    d.iter().zip(ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum()
}

/// Exact two-sided p by enumerating all sign assignments of the given ranks.
/// Ranks may be half-integers (ties), so the sums are tracked doubled.
pub fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w).round() as usize;
    let lower: f64 = counts[..=w2.min(total)].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2.min(total + 1)..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Two-sided p from the normal approximation with tie and continuity corrections.
pub fn normal_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie += t * t * t - t;
        i = j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Paired two-sided test of `x` against `y`. Zero differences are dropped;
/// up to [`EXACT_MAX_N`] remaining pairs use the exact null distribution.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    let (d, ranks) = signed_ranks(x, y)?;
    let w = w_plus(&d, &ranks);
    let exact = d.len() <= EXACT_MAX_N;
    let p = if exact { exact_p(&ranks, w) } else { normal_p(&ranks, w) };
    Ok(WilcoxonResult {
        w,
        n: d.len(),
        p,
        exact,
    })
}

/// Both p-values for the same sample, regardless of its size.
pub fn wilcoxon_both_p(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let (d, ranks) = signed_ranks(x, y)?;
    let w = w_plus(&d, &ranks);
    Ok((exact_p(&ranks, w), normal_p(&ranks, w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute force over all 2ⁿ sign patterns.
    fn brute(ranks: &[f64], w: f64) -> f64 {
        let n = ranks.len();
        let (mut lo, mut hi) = (0usize, 0usize);
        for mask in 0u32..(1 << n) {
            let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w + 1e-9 {
                lo += 1;
            }
            if s >= w - 1e-9 {
                hi += 1;
            }
        }
        let all = (1u64 << n) as f64;
        (2.0 * (lo.min(hi) as f64) / all).min(1.0)
    }

    #[test]
    fn five_positive_differences() {
        let r = wilcoxon_signed_rank(&[2.0, 3.0, 4.0, 5.0, 6.0], &[1.0; 5]).unwrap();
        assert_eq!(r.w, 15.0);
        assert_eq!(r.p, 0.0625);
        assert!(r.exact);
    }

    #[test]
    fn exact_matches_brute_force_with_ties() {
        let x = [1.0, 2.5, -0.5, 3.0, 2.5, -1.0, 0.7, 4.0, -2.5];
        let y = [0.0; 9];
        let (d, ranks) = signed_ranks(&x, &y).unwrap();
        let w = w_plus(&d, &ranks);
        assert!((exact_p(&ranks, w) - brute(&ranks, w)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_short_samples() {
        assert!(matches!(wilcoxon_signed_rank(&[1.0; 6], &[1.0; 6]), Err(Error::DegenerateSample)));
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0; 3]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn swapping_samples() {
        let x = [0.3, 1.2, -0.4, 2.2, 0.9, -1.7, 0.05];
        let y = [0.0; 7];
        let a = wilcoxon_signed_rank(&x, &y).unwrap();
        let b = wilcoxon_signed_rank(&y, &x).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(b.w, 28.0 - a.w);
    }
}
