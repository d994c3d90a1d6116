//! Deterministic seed derivation.
//!
//! Every run owns a single master seed. Components draw their randomness
//! from RNGs derived by hashing the master seed together with a stable
//! label, so adding a new consumer never shifts the streams of existing
//! ones and reordering calls cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent, reproducible RNG for `label` under `master`.
pub fn derive_rng(master: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
