//! Named, derived random streams.
//!
//! Every source of randomness in the crate draws from a ChaCha stream keyed
//! by `(root seed, purpose name, index)` through SHA-256, so adding a new
//! consumer never perturbs existing streams and runs replay exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 32-byte ChaCha seed derived from a root seed, a purpose tag and an index.
pub fn derive(seed: u64, name: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

pub fn rng(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive(seed, name, index))
}
