//! Deterministic ChaCha20 streams derived from the master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Independent stream for `(seed, label, index)`. Distinct labels or indices
/// give unrelated streams, so per-cell encryption is order independent.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"hecnn-rng-v1");
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Public identifier of the key material generated from `seed` under `fingerprint`.
pub fn key_id(fingerprint: u64, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"hecnn-key-v1");
    h.update(fingerprint.to_le_bytes());
    h.update(seed.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
