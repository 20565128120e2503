//! Rank correlation and the one-sample t-test used to relate fit quality
//! to predictive performance across parameter settings.

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooFew(usize),
    #[error("zero variance: correlation undefined")]
    ZeroVariance,
    #[error("non-finite value in input")]
    NonFinite,
}

/// Ranks starting at 1; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && values[order[end]] == values[order[k]] {
            end += 1;
        }
        // positions k..end hold ranks k+1..=end
        let rank = (k + 1 + end) as f64 / 2.0;
        for &i in &order[k..end] {
            ranks[i] = rank;
        }
        k = end;
    }
    ranks
}

/// Pearson correlation of two rank vectors. Doubled average ranks are
/// integers, so the centered sums are formed exactly as `n * sum(xy) -
/// sum(x) sum(y)` and only the final division rounds.
fn rank_pearson(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let n = a.len() as f64;
    let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (2.0 * x, 2.0 * y);
        sa += x;
        sb += y;
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    let cov = n * sab - sa * sb;
    let va = n * saa - sa * sa;
    let vb = n * sbb - sb * sb;
    if va == 0.0 || vb == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let rho = if va == vb { cov / va } else { cov / (va * vb).sqrt() };
    Ok(rho.clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooFew(a.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    rank_pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
}

/// Tests the sample mean against `mu0` with Student's t on `n - 1` degrees
/// of freedom.
pub fn one_sample_t_test(values: &[f64], mu0: f64) -> Result<TTest, StatsError> {
    let n = values.len();
    if n < 2 {
        return Err(StatsError::TooFew(n));
    }
    if values.iter().any(|v| !v.is_finite()) || !mu0.is_finite() {
        return Err(StatsError::NonFinite);
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let t = (mean - mu0) / (var.sqrt() / nf.sqrt());
    let df = nf - 1.0;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}
