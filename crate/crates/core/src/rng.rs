//! Seeded random streams. Every consumer derives its own stream from the run
//! seed and a stable key, so results never depend on call order or threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to mix keys into seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a string key.
pub fn key_hash(key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut s = mix64(seed);
    for &k in keys {
        s = mix64(s ^ k);
    }
    ChaCha8Rng::seed_from_u64(s)
}

pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    stream(seed, &[key_hash(name)])
}
