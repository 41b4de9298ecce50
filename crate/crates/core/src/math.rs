//! Scalar helpers: libm wrappers, compensated sums, normal tails.

use alloc::vec::Vec;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}
#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}
#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}
#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}
#[inline]
pub fn tan(x: f64) -> f64 {
    libm::tan(x)
}
#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

/// Neumaier compensated accumulator. Summation order is the call order, so
/// results are reproducible for a fixed input sequence.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    sum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    sum(xs.iter().map(|x| (x - m) * (x - m))) / (n - 1) as f64
}

/// Standard error of the sample mean.
pub fn std_err(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    sqrt(variance(xs) / xs.len() as f64)
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let sxy = sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let sxx = sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    sxy / sxx
}

/// Maximum of a slice, `-inf` when empty.
pub fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Normalized weights exp(l - max l) / sum, plus the effective sample size.
pub fn normalized_weights(log_w: &[f64]) -> (Vec<f64>, f64) {
    let m = max(log_w);
    let raw: Vec<f64> = log_w.iter().map(|l| exp(l - m)).collect();
    let total = sum(raw.iter().copied());
    let w: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let ess = 1.0 / sum(w.iter().map(|x| x * x));
    (w, ess)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut xs = alloc::vec![1.0e16];
        xs.extend(core::iter::repeat(1.0).take(1000));
        xs.push(-1.0e16);
        assert_eq!(sum(xs), 1000.0);
    }

    #[test]
    fn normal_cdf_known_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.96) - 0.975_002_104_851_78).abs() < 1e-12);
    }

    #[test]
    fn ess_of_uniform_weights_is_n() {
        let (w, ess) = normalized_weights(&[0.3; 8]);
        assert!((ess - 8.0).abs() < 1e-12);
        assert!((w[3] - 0.125).abs() < 1e-15);
    }
}
