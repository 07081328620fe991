//! Run manifest embedded in every emitted report.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use qedge_core::decoder::ModelConfig;
use qedge_core::io::crc32;

/// Provenance record: what produced a report, with what inputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub toolkit_version: String,
    pub host_os: String,
    pub host_arch: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<String>,
    /// CRC32 of the model file bytes, `crc32:xxxxxxxx`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_checksum: Option<String>,
    /// CRC32 of the packed model-config record.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Flag values as given on the command line.
    pub flags: Value,
}

impl RunManifest {
    pub fn new(subcommand: &str, flags: Value) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            host_os: std::env::consts::OS.to_string(),
            host_arch: std::env::consts::ARCH.to_string(),
            seed: None,
            model_path: None,
            model_checksum: None,
            config_hash: None,
            flags,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_model(mut self, path: &Path, bytes: &[u8], config: &ModelConfig) -> Self {
        self.model_path = Some(path.display().to_string());
        self.model_checksum = Some(format!("crc32:{:08x}", crc32(bytes)));
        self.config_hash = Some(config_hash(config));
        self
    }
}

/// Hash of the packed little-endian config record.
pub fn config_hash(config: &ModelConfig) -> String {
    let mut bytes = Vec::with_capacity(24);
    for v in [
        config.embed_dim,
        config.n_heads,
        config.ff_dim,
        config.max_seq_len,
        config.n_blocks,
        config.vocab_size,
    ] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    format!("crc32:{:08x}", crc32(&bytes))
}
