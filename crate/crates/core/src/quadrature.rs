//! Gauss–Hermite quadrature for Gaussian expectations.

use alloc::vec::Vec;

use crate::math::{exp, sqrt};

/// Rule for `E[g(m + s Z)]`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    /// Standard-normal abscissae.
    pub nodes: Vec<f64>,
    /// Weights summing to one.
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Default 64-point rule.
    pub fn standard() -> Self {
        Self::new(64)
    }

    /// `n`-point rule; roots of the physicists' Hermite polynomial by Newton
    /// iteration on the normalized recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let pim4 = 0.751_125_544_464_942_5_f64; // pi^(-1/4)
        let mut x = alloc::vec![0.0; n];
        let mut w = alloc::vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => sqrt(2.0 * nf + 1.0) - 1.85575 * libm::pow(2.0 * nf + 1.0, -1.0 / 6.0),
                1 => z - 1.14 * libm::pow(nf, 0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * sqrt(2.0 / (jf + 1.0)) * p2 - sqrt(jf / (jf + 1.0)) * p3;
                }
                pp = sqrt(2.0 * nf) * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let inv_sqrt_pi = 1.0 / sqrt(core::f64::consts::PI);
        let nodes: Vec<f64> = x.iter().rev().map(|xi| xi * core::f64::consts::SQRT_2).collect();
        let weights: Vec<f64> = w.iter().rev().map(|wi| wi * inv_sqrt_pi).collect();
        Self { nodes, weights }
    }

    /// `E[g(X)]` for `X ~ N(mean, variance)`.
    pub fn expect(&self, mean: f64, variance: f64, mut g: impl FnMut(f64) -> f64) -> f64 {
        let s = sqrt(variance.max(0.0));
        crate::math::sum(self.nodes.iter().zip(&self.weights).map(|(z, w)| w * g(mean + s * z)))
    }
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    exp(-0.5 * z * z) / sqrt(2.0 * core::f64::consts::PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one_and_nodes_are_symmetric() {
        let q = GaussHermite::standard();
        assert!((crate::math::sum(q.weights.iter().copied()) - 1.0).abs() < 1e-13);
        for i in 0..64 {
            assert!((q.nodes[i] + q.nodes[63 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_moments_are_exact() {
        let q = GaussHermite::standard();
        assert!((q.expect(0.0, 1.0, |x| x * x) - 1.0).abs() < 1e-12);
        assert!((q.expect(0.0, 1.0, |x| x.powi(4)) - 3.0).abs() < 1e-11);
        assert!((q.expect(1.0, 4.0, |x| x * x) - 5.0).abs() < 1e-12);
        // E[exp(X)] = exp(m + v/2)
        assert!((q.expect(0.3, 0.5, exp) - exp(0.55)).abs() < 1e-12);
    }

    #[test]
    fn small_rule_matches_known_nodes() {
        let q = GaussHermite::new(3);
        assert!((q.nodes[2] - sqrt(3.0)).abs() < 1e-14);
        assert!((q.weights[1] - 2.0 / 3.0).abs() < 1e-14);
    }
}
