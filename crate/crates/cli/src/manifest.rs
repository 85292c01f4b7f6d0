//! Run provenance written next to every output set.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = concat!("hdiv ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved settings after merging flags, config file and defaults.
    pub config: serde_json::Value,
    /// SHA-256 of the compact JSON form of `config`.
    pub config_digest: String,
    pub seed: u64,
    pub tool_version: String,
    pub generator: Option<String>,
    pub started_at: String,
    pub finished_at: String,
    pub deviations: Vec<String>,
    pub outputs: Vec<String>,
}

/// Hex SHA-256 of the compact serialization (object keys sorted).
pub fn config_digest(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values always serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
