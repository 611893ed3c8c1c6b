//! Counter-based seed derivation.
//!
//! Every random object in the pipeline (sampled system, input sequence,
//! evaluation noise, weight init) is drawn from a ChaCha8 stream whose seed
//! is a pure function of `(global_seed, purpose tag, counters)`. This makes
//! batch generation reproducible regardless of worker scheduling and keeps
//! the training and evaluation seed spaces disjoint.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed-space tags. Mixed into every derived seed so that distinct purposes
/// can never collide even with identical counters.
pub mod tag {
    pub const TRAIN: u64 = 0x7452_4149_4e00_0001;
    pub const EVAL: u64 = 0x4556_414c_0000_0002;
    pub const NOISE: u64 = 0x4e4f_4953_4500_0003;
    pub const INIT: u64 = 0x494e_4954_0000_0004;
    pub const RESAMPLE: u64 = 0x5245_5341_4d00_0005;
}

/// SplitMix64 finalizer. Full-avalanche 64-bit mixing.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into a single seed, mixing after each word.
pub fn mix_words(words: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3; // arbitrary non-zero start
    for &w in words {
        h = mix64(h ^ w);
    }
    h
}

/// Seed for the dataset at `(iteration, slot)` in a given seed space.
pub fn dataset_seed(global_seed: u64, space: u64, iteration: u64, slot: u64) -> u64 {
    mix_words(&[global_seed, space, iteration, slot])
}

/// Replacement seed when a dataset slot produced a degenerate output.
pub fn resample_seed(seed: u64, attempt: u64) -> u64 {
    mix_words(&[seed, tag::RESAMPLE, attempt])
}

/// Deterministic RNG for a derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
