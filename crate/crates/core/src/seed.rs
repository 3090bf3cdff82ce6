//! Seed derivation.
//!
//! Every random stream in the pipeline is keyed by a root seed plus a
//! `(component, index)` pair, so results do not depend on execution order or
//! thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a sub-seed from a root seed, a component name and an index.
pub fn derive(root: u64, component: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((component.len() as u64).to_le_bytes());
    h.update(component.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn rng(root: u64, component: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive(root, component, index))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
