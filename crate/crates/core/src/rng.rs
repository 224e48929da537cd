//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`Rng`] (ChaCha8, a counter
//! based generator whose output is identical on every platform). Named
//! sub-streams are derived from a global seed with SplitMix64 so that
//! e.g. changing the corruption seed never perturbs training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Sub-stream names used by the pipeline.
pub mod stream {
    pub const TRAIN_F: &str = "train-f";
    pub const TRAIN_H: &str = "train-h";
    pub const CORRUPTION: &str = "corruption";
    pub const AL: &str = "al";
    pub const OOD: &str = "ood";
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
}

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the named sub-stream of `seed`.
pub fn substream(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Seed for item `index` of a per-sample stream.
pub fn indexed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
