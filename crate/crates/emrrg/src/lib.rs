//! File formats and command implementations for the `emrrg` binary:
//! TOML run configs, the on-disk corpus, checkpoints, run manifests and the
//! ablation driver.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod published;
pub mod table;

pub use error::{AppError, Result};

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Worker count from `EMRRG_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("EMRRG_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            AppError::Config(format!(
                "EMRRG_THREADS must be a positive integer, got `{v}`"
            ))
        }),
    }
}
