//! Seed derivation. Every random stream in a run descends from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a root seed with a purpose tag and an index (SplitMix64 finalizer).
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    let mut h = root ^ 0x9e37_79b9_7f4a_7c15;
    for b in purpose.bytes().chain(index.to_le_bytes()) {
        h = mix(h ^ u64::from(b));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(root: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, index))
}
