//! Deterministic pseudo-random numbers.
//!
//! The generator is SplitMix64 (Steele, Lea and Flood): a 64-bit counter
//! advanced by the golden-ratio increment `0x9E37_79B9_7F4A_7C15`, followed by
//! the variant-13 finalizer. It is implemented here, rather than taken from a
//! crate, so the streams stay fixed across dependency upgrades and platforms.
//!
//! Uniform doubles use the top 53 bits of each output. Gaussian samples use the
//! Box-Muller transform, consuming two outputs per sample and discarding the
//! sine branch.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by rejection (Lemire's multiply-shift).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(bound);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn next_gaussian(&mut self, mean: f64, std_dev: f64) -> f64 {
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        mean + std_dev * radius * (std::f64::consts::TAU * u2).cos()
    }
}

/// Distributions accepted by [`seeded_fill`](super::Tensor::seeded_fill).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Uniform on `[-1, 1)`.
    Uniform,
    /// Normal with mean 0 and standard deviation 0.02.
    Gaussian,
}

impl Distribution {
    pub(crate) fn sample(self, rng: &mut SplitMix64) -> f64 {
        match self {
            Distribution::Uniform => 2.0 * rng.next_f64() - 1.0,
            Distribution::Gaussian => rng.next_gaussian(0.0, 0.02),
        }
    }
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: u64) -> u64 {
    let mut mixer = SplitMix64::new(base ^ label.wrapping_mul(0xD1B5_4A32_D192_ED03));
    mixer.next_u64()
}
