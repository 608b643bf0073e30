//! Counter-based seed derivation.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is a
//! pure function of `(root seed, stage, index)`, so changing a batch size or a
//! step count never shifts unrelated draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stage tags. Values are part of the reproducibility contract; do not renumber.
pub mod stage {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const SAMPLE_INIT: u64 = 5;
    pub const SAMPLE_RENOISE: u64 = 6;
    pub const PROJECTIONS: u64 = 7;
    pub const DATAFREE: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const PERMUTATION: u64 = 10;
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stage: u64, index: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ stage.rotate_left(32)) ^ index)
}

pub fn stream(seed: u64, stage: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stage, index))
}

/// Uniform in `[0, 1)` from a hash value.
pub fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
