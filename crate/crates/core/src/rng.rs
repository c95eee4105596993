//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PodRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> PodRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A stream identified by `(seed, tag, index)`. Distinct tags separate the
/// purposes a seed is used for (initialization, shuffling, Gumbel noise).
pub fn substream(seed: u64, tag: u64, index: u64) -> PodRng {
    seeded(mix(mix(seed ^ mix(tag)) ^ index))
}

pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const GUMBEL: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const EPISODES: u64 = 6;
}
