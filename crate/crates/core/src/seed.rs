//! Seed derivation shared by every randomized component.
//!
//! All child seeds are produced by SplitMix64 over `base + GOLDEN * (stream + 1)`, so
//! a (base seed, stream index) pair always maps to the same generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed for stream `index` of `base`.
pub fn derive(base: u64, index: u64) -> u64 {
    splitmix64(base.wrapping_add(GOLDEN.wrapping_mul(index.wrapping_add(1))))
}

/// Derive a seed from a base and a domain tag, keeping unrelated consumers apart.
pub fn derive_tagged(base: u64, tag: &str, index: u64) -> u64 {
    let tag_hash = tag
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
    derive(base ^ tag_hash, index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
