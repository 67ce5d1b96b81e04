//! Small descriptive statistics.

use alloc::vec::Vec;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard deviation with divisor `n − 1`.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    libm::sqrt(ss / (xs.len() - 1) as f64)
}

/// Quantile by linear interpolation between order statistics (type 7).
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_finite(xs: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Five-number summary plus mean, over the finite entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

impl MseSummary {
    pub fn of(xs: &[f64]) -> Self {
        let v = sorted_finite(xs);
        MseSummary {
            min: v.first().copied().unwrap_or(f64::NAN),
            q1: quantile_type7(&v, 0.25),
            median: quantile_type7(&v, 0.5),
            mean: mean(&v),
            q3: quantile_type7(&v, 0.75),
            max: v.last().copied().unwrap_or(f64::NAN),
            count: v.len(),
        }
    }
}

/// Median of the finite entries.
pub fn median(xs: &[f64]) -> f64 {
    quantile_type7(&sorted_finite(xs), 0.5)
}
