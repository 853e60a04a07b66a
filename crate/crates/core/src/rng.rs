//! Deterministic randomness. Every random draw in the pipeline comes from a
//! named sub-stream of one global seed, e.g. `substream(seed, "masking/3")`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives an independent generator for `label` from the global `seed`.
pub fn substream(seed: u64, label: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(format!("seed/{seed}/{label}").as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Hex SHA-256 of a byte buffer; used for artifact provenance.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
