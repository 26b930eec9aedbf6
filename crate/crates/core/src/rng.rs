//! Deterministic random-stream derivation. Every consumer of randomness gets
//! its own stream, derived from the run seed and a purpose tag, so that the
//! order in which components draw has no effect on any other component and
//! resuming at step k reproduces exactly the stream step k saw originally.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from a base seed and a purpose tag such as
/// `"init/decoder.head.weight"`, `"sample/0/17"`, or `"step/4200"`.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
