//! Seed derivation for reproducible runs.
//!
//! Every random stream in the crate (parameter init, shuffling, dropout) is
//! seeded from the run seed plus a stable tag, so streams are pure functions
//! of their coordinates and never depend on how many draws another component
//! made before them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes.
fn hash_tag(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(seed: u64, tag: &str, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(mix(seed ^ hash_tag(tag)), |acc, &c| mix(acc ^ mix(c)))
}

pub fn stream(seed: u64, tag: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, coords))
}
