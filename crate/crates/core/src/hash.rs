//! Deterministic seeding helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG whose stream depends only on `(key, seed)`.
pub fn keyed_rng(key: &str, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()) ^ seed.rotate_left(17))
}
