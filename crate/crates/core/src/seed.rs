//! Seed derivation.
//!
//! All randomness in a run is keyed by a 64-bit master seed mixed with the
//! coordinates of the consumer (round, client, layer, ...) and a purpose tag.
//! The mix is the SplitMix64 finalizer applied after folding each part in,
//! which gives full avalanche on every input bit. Because each consumer's
//! stream depends only on its own coordinates, work can be scheduled in any
//! order or on any number of threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating independent streams that share coordinates.
pub mod tag {
    pub const CLIENT_SAMPLING: u64 = 0x5341_4d50;
    pub const LOCAL_SHUFFLE: u64 = 0x5348_5546;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const INIT: u64 = 0x494e_4954;
    pub const PSEUDO_CLASSES: u64 = 0x5053_4555;
    pub const MIXTURES: u64 = 0x4d49_5854;
    pub const COUNT_SHARES: u64 = 0x434f_554e;
    pub const CLASS_SHUFFLE: u64 = 0x434c_5348;
    pub const KMEANS: u64 = 0x4b4d_4e53;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const CONFUSION: u64 = 0x434f_4e46;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `master`, one SplitMix64 round per part.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix_finalize(master.wrapping_add(GOLDEN));
    for &part in parts {
        state = splitmix_finalize(state ^ part.wrapping_add(GOLDEN).wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    state
}

/// Deterministic generator for a derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for `rng(derive(master, parts))`.
pub fn rng_for(master: u64, parts: &[u64]) -> ChaCha8Rng {
    rng(derive(master, parts))
}
