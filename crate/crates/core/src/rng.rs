//! Named, seed-derived random streams.
//!
//! Every consumer of randomness draws from its own stream so that switching
//! one subsystem off never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a of a string.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Deterministic stream for `(seed, name, index)`.
pub fn stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let key = splitmix(splitmix(seed) ^ fnv1a(name)).wrapping_add(splitmix(index ^ 0xA5A5_A5A5));
    ChaCha8Rng::seed_from_u64(splitmix(key))
}
