//! Counter-keyed random streams.
//!
//! A stream is identified by `(seed, domain, index)`: the seed and a domain
//! tag form the ChaCha8 key, the path (or record) index selects the ChaCha
//! stream, and each time step consumes exactly two 64-bit words. The normal
//! pair drawn at step `k` therefore depends only on `(seed, domain, index, k)`
//! and not on how work is scheduled.

use core::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::math::{cos, ln, sin, sqrt};

/// Separates the random streams used by different parts of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Truth state and measurement noise of synthetic observation records.
    Truth = 1,
    /// Prior draws for truth paths.
    TruthInit = 2,
    /// Signal noise of ensemble paths.
    Ensemble = 3,
    /// Prior draws for ensemble paths.
    EnsembleInit = 4,
    /// Resampling uniforms.
    Resample = 5,
    /// Pure Brownian observation records.
    Brownian = 6,
}

/// 32-bit ChaCha words consumed per time step (two u64 draws).
const WORDS_PER_STEP: u128 = 4;

#[derive(Clone, Debug)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, domain: Domain, index: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
        key[16..24].copy_from_slice(b"fbsde-rn");
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        Self { rng, spare: None }
    }

    /// Stream positioned at the start of step `step`.
    pub fn at_step(seed: u64, domain: Domain, index: u64, step: usize) -> Self {
        let mut s = Self::new(seed, domain, index);
        s.rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        s.spare = None;
        s
    }

    /// Uniform on (0, 1].
    #[inline]
    fn open_uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Two uniforms on (0, 1]; consumes one step.
    #[inline]
    pub fn uniform_pair(&mut self) -> (f64, f64) {
        (self.open_uniform(), self.open_uniform())
    }

    /// Two independent standard normals (Box–Muller); consumes one step.
    #[inline]
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let (u1, u2) = self.uniform_pair();
        let r = sqrt(-2.0 * ln(u1));
        let theta = 2.0 * PI * u2;
        (r * cos(theta), r * sin(theta))
    }

    /// One standard normal; uses both halves of each Box–Muller pair, so two
    /// calls consume one step. Do not interleave with [`Self::normal_pair`].
    #[inline]
    pub fn normal(&mut self) -> f64 {
        match self.spare.take() {
            Some(z) => z,
            None => {
                let (a, b) = self.normal_pair();
                self.spare = Some(b);
                a
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn random_access_matches_sequential() {
        let mut seq = NormalStream::new(7, Domain::Ensemble, 3);
        let draws: Vec<_> = (0..10).map(|_| seq.normal_pair()).collect();
        let mut jump = NormalStream::at_step(7, Domain::Ensemble, 3, 6);
        assert_eq!(jump.normal_pair(), draws[6]);
    }

    #[test]
    fn domains_and_paths_are_distinct() {
        let a = NormalStream::new(1, Domain::Truth, 0).normal_pair();
        let b = NormalStream::new(1, Domain::Ensemble, 0).normal_pair();
        let c = NormalStream::new(1, Domain::Truth, 1).normal_pair();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        let mut s = NormalStream::new(11, Domain::Brownian, 0);
        let n = 200_000;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for _ in 0..n / 2 {
            let (a, b) = s.normal_pair();
            m1 += a + b;
            m2 += a * a + b * b;
        }
        let m1 = m1 / n as f64;
        let m2 = m2 / n as f64;
        assert!(m1.abs() < 4.0 / sqrt(n as f64));
        assert!((m2 - 1.0).abs() < 4.0 * sqrt(2.0 / n as f64));
    }
}
