//! Seed-derived random streams.
//!
//! One master seed governs generation, splitting, initialization, shuffling
//! and dropout. Each consumer derives its own independent stream from
//! `(seed, tag)` so that parallel and serial execution draw identical values.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG from a master seed and a stream tag.
///
/// Tags are plain strings such as `"anatomy/pos/003"` or `"dropout/2/14"`;
/// distinct tags give statistically independent streams.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
