//! Seeded, platform-independent random streams.
//!
//! The generator is xoshiro256++ whose 256-bit state is expanded from the
//! 64-bit seed with splitmix64 (the `rand_xoshiro` crate's `seed_from_u64`).
//! Uniform `f64` draws take the top 53 bits of a `u64`; standard normal draws
//! use the `rand_distr` ziggurat sampler. Integer ranges are sampled from
//! `u64` so 32-bit and 64-bit targets produce the same stream.

use rand::RngExt;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

/// A single-owner deterministic random stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64-bit hash of a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    /// Stream for a named purpose under a root seed. Distinct labels give
    /// independent streams; the same (seed, label) always gives the same one.
    pub fn labeled(seed: u64, label: &str) -> Self {
        Self::new(seed ^ fnv1a64(label.as_bytes()).rotate_left(17))
    }

    /// Derives a child stream, advancing this one by a single draw.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(9);
        let mut b = SeededRng::new(9);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn first_draws_are_pinned() {
        // xoshiro256++ seeded through splitmix64 with seed 0.
        let mut rng = SeededRng::new(0);
        let draws: Vec<u64> = (0..10).map(|_| rng.next_u64()).collect();
        assert_eq!(draws, PINNED_SEED0);
    }

    #[test]
    fn labels_separate_streams() {
        let mut a = SeededRng::labeled(1, "pretrain");
        let mut b = SeededRng::labeled(1, "expert");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_and_below_in_range() {
        let mut rng = SeededRng::new(3);
        for _ in 0..1000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(rng.below(7) < 7);
        }
    }

    #[test]
    fn fnv_known_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    // Computed with a standalone splitmix64 + xoshiro256++ reference.
    const PINNED_SEED0: [u64; 10] = [
        0x53175d61490b23df,
        0x61da6f3dc380d507,
        0x5c0fdf91ec9a7bfc,
        0x02eebf8c3bbe5e1a,
        0x7eca04ebaf4a5eea,
        0x0543c37757f08d9a,
        0xdb7490c75ab5026e,
        0xd87343e6464bc959,
        0x4b7da0a02389f0ff,
        0x1300fc58c0424c16,
    ];
}
