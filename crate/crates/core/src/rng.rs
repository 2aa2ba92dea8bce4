//! Deterministic RNG streams. Every stochastic operation takes a seed or an
//! explicit generator so runs replay bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream from a base seed and a purpose label.
///
/// Streams with different labels are statistically independent, and the
/// mapping is stable across runs and platforms.
pub fn stream(base_seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&base_seed.to_le_bytes());
    let digest = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(label.as_bytes());
        h.finalize()
    };
    for (k, d) in key[8..].iter_mut().zip(digest.iter()) {
        *k = *d;
    }
    ChaCha8Rng::from_seed(key)
}

/// Sub-stream keyed by an index (episode number, batch number, ...).
pub fn indexed_stream(base_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut rng = stream(base_seed, label);
    rng.set_stream(index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a1 = stream(7, "x").next_u64();
        let a2 = stream(7, "x").next_u64();
        let b = stream(7, "y").next_u64();
        let c = stream(8, "x").next_u64();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
        assert_ne!(indexed_stream(7, "x", 0).next_u64(), indexed_stream(7, "x", 1).next_u64());
    }
}
