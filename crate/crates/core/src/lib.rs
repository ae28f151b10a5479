//! Desk-scale laboratory for dual-group GRPO with posterior-driven context
//! gating on a synthetic noisy-context relevance task.

pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod dpo;
pub mod env;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod optim;
pub mod policy;
pub mod pool;
pub mod seed;
pub mod sft;
pub mod suite;

pub use error::{Error, Result};
