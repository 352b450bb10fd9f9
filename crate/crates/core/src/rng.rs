//! SplitMix64 stream with a Box–Muller normal sampler.
//!
//! The stream is bit-identical on every platform: one 64-bit state word,
//! wrapping integer arithmetic only, and a fixed word-to-real conversion
//! `(word >> 11) * 2^-53`.

use std::f64::consts::PI;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    state: u64,
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            cached_normal: None,
        }
    }

    /// Derives an independent seed from `seed` and a stream label, so that
    /// separate consumers (parameter init, batch sampling, ...) do not share
    /// a stream.
    pub fn derive_seed(seed: u64, label: &str) -> u64 {
        // FNV-1a over the label, then one SplitMix round to mix in the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Rng::new(seed ^ h).next_u64()
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` (n > 0), by scaling the uniform real.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal. Box–Muller consumes two words per pair and caches the
    /// second value.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        self.cached_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Tensor of i.i.d. standard normals, filled in row-major order.
pub fn randn(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(shape_err!("randn requires non-zero dimensions, got {shape:?}"));
    }
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.normal()).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_word_of_seed_zero() {
        let mut rng = Rng::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn uniform_conversion_is_top_53_bits() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        let w = b.next_u64();
        assert_eq!(a.next_f64(), (w >> 11) as f64 / 9007199254740992.0);
    }

    #[test]
    fn randn_is_reproducible() {
        let x = randn(&[2, 3, 4, 5], &mut Rng::new(11)).unwrap();
        let y = randn(&[2, 3, 4, 5], &mut Rng::new(11)).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn randn_rejects_zero_dims() {
        assert!(randn(&[1, 0, 2, 2], &mut Rng::new(0)).is_err());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(Rng::derive_seed(1, "a"), Rng::derive_seed(1, "b"));
        assert_eq!(Rng::derive_seed(1, "a"), Rng::derive_seed(1, "a"));
    }
}
