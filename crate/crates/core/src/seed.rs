//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator whose seed is
//! derived from the user seed plus a purpose label, so that sharding or
//! reordering work never changes what a given item draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hash a base seed together with string and integer parts into a new seed.
pub fn derive(seed: u64, label: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_parts_separate_streams() {
        let a = derive(7, "doc", &[1]);
        assert_eq!(a, derive(7, "doc", &[1]));
        assert_ne!(a, derive(7, "doc", &[2]));
        assert_ne!(a, derive(7, "do", &[1]));
        assert_ne!(a, derive(8, "doc", &[1]));
    }
}
