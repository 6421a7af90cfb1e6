//! Seeded random streams.
//!
//! Every Monte-Carlo batch, generated instance and weight draw gets its own
//! ChaCha stream derived from a master seed and a path of integer labels.
//! Streams never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a path of labels into a single 64-bit key.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p.wrapping_add(GOLDEN))))
}

/// Independent stream for `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(derive(seed, path));
    rng
}

/// Domain labels used as the first element of stream paths.
pub mod domain {
    pub const MC_BATCH: u64 = 1;
    pub const WEIGHTS: u64 = 2;
    pub const INSTANCE: u64 = 3;
    pub const CODEBOOK: u64 = 4;
    pub const GRAMMAR: u64 = 5;
    pub const HARNESS: u64 = 6;
    pub const PAIR: u64 = 7;
    pub const SWEEP: u64 = 8;
}
