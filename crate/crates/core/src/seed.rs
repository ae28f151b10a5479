//! Seed fan-out and run provenance.
//!
//! A stage seed is the first eight bytes (little-endian) of
//! `SHA-256(global_seed.to_le_bytes() || stage_name)` shifted right by one bit
//! (seeds stay representable as TOML integers). Stages therefore get
//! independent, reproducible streams and can be rerun in isolation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sub_seed(global: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) >> 1
}

/// Short hex digest of a canonical config rendering.
pub fn config_hash(canonical: &str) -> String {
    let d = Sha256::digest(canonical.as_bytes());
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Stamp written into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn comment_line(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }
}
