//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a base seed plus a stream tag, so that parallel workers
//! never share state and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed for stream `tag` of `base`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ tag.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(base: u64, tag: u64) -> Rng {
    rng(derive_seed(base, tag))
}
