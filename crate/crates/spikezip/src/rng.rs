//! Deterministic randomness, split per purpose.
//!
//! One user seed fans out into independent streams so that adding draws to
//! one consumer (say, dropout) can never shift another (say, Poisson
//! encoding). Streams are keyed by `(purpose, index)` through splitmix64.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is for. The discriminant is part of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    WeightInit = 1,
    MaskInit = 2,
    Dropout = 3,
    Poisson = 4,
    Shuffle = 5,
    Data = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Root seed holder; hands out per-purpose, per-index generators.
#[derive(Debug, Clone, Copy)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        SeedSplitter { root }
    }

    /// Derive the `u64` seed for `(purpose, index)`.
    pub fn seed(&self, purpose: Purpose, index: u64) -> u64 {
        splitmix64(splitmix64(self.root ^ ((purpose as u64) << 56)) ^ index)
    }

    /// Fresh generator for `(purpose, index)`.
    pub fn rng(&self, purpose: Purpose, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(purpose, index))
    }
}
