//! Seeded random streams.
//!
//! Every consumer of randomness asks for its own stream identified by
//! `(master seed, purpose tag, counter)`. The triple is folded through
//! splitmix64 into a xoshiro256++ state, so streams are reproducible on any
//! platform and independent of how many draws other streams made.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(tag: &str) -> u64 {
    tag.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    tag: String,
    counter: u64,
    inner: Xoshiro256PlusPlus,
}

impl RngStream {
    pub fn new(seed: u64, tag: &str, counter: u64) -> Self {
        let mut sm = SplitMix64::seed_from_u64(seed);
        let a = sm.next_u64() ^ fnv1a(tag);
        let mut sm = SplitMix64::seed_from_u64(a);
        let b = sm.next_u64() ^ counter;
        let mut sm = SplitMix64::seed_from_u64(b);
        let mut state = [0u8; 32];
        for chunk in state.chunks_mut(8) {
            chunk.copy_from_slice(&sm.next_u64().to_le_bytes());
        }
        RngStream {
            seed,
            tag: tag.to_string(),
            counter,
            inner: Xoshiro256PlusPlus::from_seed(state),
        }
    }

    /// Stream for the same seed under another tag or counter.
    pub fn sibling(&self, tag: &str, counter: u64) -> Self {
        RngStream::new(self.seed, tag, counter)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller; consumes exactly two uniforms.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % n;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Seeded permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
