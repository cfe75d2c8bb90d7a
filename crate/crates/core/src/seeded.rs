//! Pinned, platform-independent randomness.
//!
//! Every random choice in the pipeline goes through [`SeededRng`], a ChaCha8
//! stream (RFC 7539 block function, 8 rounds) from `rand_chacha`. Bounded
//! integers are drawn by rejection sampling on raw `u64` output so that the
//! selected values depend only on the ChaCha8 keystream and never on the
//! `rand` crate's distribution internals.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// A generator whose stream is a function of `seed` and an arbitrary label,
    /// used where draws must not depend on processing order.
    pub fn derived(seed: u64, label: &str) -> Self {
        let digest = crate::sha256_hex(format!("{seed}\u{1f}{label}"));
        let mut bytes = [0u8; 32];
        hex::decode_to_slice(&digest, &mut bytes).expect("sha256 hex is 64 chars");
        Self(ChaCha8Rng::from_seed(bytes))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `0..bound`. Panics if `bound == 0`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        // Largest multiple of `bound` that fits; values above it are rejected.
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.0.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Uniform float in `[0, 1)` from the top 53 bits.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Chooses `k` distinct indices from `0..n` by a partial Fisher-Yates
    /// shuffle. The result is in selection order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
