//! Named deterministic random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`, a
//! portable, counter-based cipher stream) whose 256-bit key is built from
//! the run seed and a purpose label:
//!
//! ```text
//! key[0..8]   = seed as u64 little-endian
//! key[8..16]  = FNV-1a 64 of the purpose label, little-endian
//! key[16..32] = 0
//! ```
//!
//! The draw counter is the ChaCha word position, so `(seed, purpose,
//! counter)` identifies a draw on every platform. Gaussian draws go through
//! `rand_distr::StandardNormal` (ziggurat), uniform floats through
//! `rand`'s 53-bit conversion.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    purpose: String,
    inner: ChaCha8Rng,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl RngStream {
    pub fn new(seed: u64, purpose: &str) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a64(purpose.as_bytes()).to_le_bytes());
        RngStream {
            seed,
            purpose: purpose.to_string(),
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Stream positioned at an explicit draw counter.
    pub fn at(seed: u64, purpose: &str, counter: u128) -> Self {
        let mut s = Self::new(seed, purpose);
        s.inner.set_word_pos(counter);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn purpose(&self) -> &str {
        &self.purpose
    }

    /// Current draw counter (32-bit words consumed).
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Child stream with purpose `"{purpose}/{label}"` and the same seed.
    pub fn child(&self, label: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.purpose, label))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.uniform() < p
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}
