//! Seed plumbing.
//!
//! One 64-bit run seed fans out into named substreams so that a module's
//! randomness does not shift when another module draws more or fewer values.
//! Per-position draws (masking) use a counter-based hash instead of a stream,
//! which keeps them independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derive a 64-bit child seed for a named substream.
pub fn child_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based 64-bit hash of `seed` and a key tuple.
pub fn keyed_u64(seed: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &k in keys {
        h = splitmix64(h ^ k);
    }
    h
}

/// Uniform draw in `[0, 1)` keyed by `seed` and a key tuple.
pub fn keyed_uniform(seed: u64, keys: &[u64]) -> f64 {
    (keyed_u64(seed, keys) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
