//! Seed plumbing. Every random consumer derives its own ChaCha stream from a
//! root seed and a path of labels/indices, so results never depend on the
//! order in which unrelated consumers draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic child seed for a named sub-stream.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h = splitmix(seed);
    for b in label.bytes() {
        h = splitmix(h ^ b as u64);
    }
    h
}

/// Deterministic child seed for an indexed sub-stream.
pub fn derive_index(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, label))
}

pub fn indexed(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_index(seed, index))
}
