//! Hierarchical seed derivation.
//!
//! Every random draw in a run is addressed as (run seed → purpose → index),
//! so the streams do not depend on scheduling or on how many draws other
//! consumers made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Child seed for `(parent, tag, index)`.
pub fn derive_seed(parent: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ hash_tag(tag)).wrapping_add(splitmix64(index)))
}

pub fn rng_for(parent: u64, tag: &str, index: u64) -> Prng {
    Prng::seed_from_u64(derive_seed(parent, tag, index))
}
