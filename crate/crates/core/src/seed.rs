//! Seed derivation and random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream seeded by
//! [`derive_seed`], so a master seed fixes the whole experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha12Rng;

/// Stable 64-bit hash of `(master, stage, index)`.
///
/// The first eight bytes of `SHA-256(master_le || len(stage)_le || stage || index_le)`,
/// read little-endian. Distinct stage names or indices give unrelated seeds.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&out[..8]);
    u64::from_le_bytes(first)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// SHA-256 of a byte string, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
