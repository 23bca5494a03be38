//! Provenance sidecars written next to every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: serde_json::Value,
    /// SHA-256 of the artifact bytes.
    pub artifact_hash: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_os_string();
    name.push(".meta.json");
    PathBuf::from(name)
}

impl Provenance {
    pub fn new(command: &str, config_hash: String, seeds: serde_json::Value, artifact: &[u8]) -> Self {
        Provenance {
            tool: "tunegram".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash,
            seeds,
            artifact_hash: crate::config::hash_hex(artifact),
            extra: serde_json::Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra
            .insert(key.into(), serde_json::to_value(value).expect("serializable"));
        self
    }

    pub fn write_for(&self, artifact: &Path) -> Result<(), CliError> {
        let path = sidecar_path(artifact);
        let text = serde_json::to_string_pretty(self).expect("provenance serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// Writes an artifact and its sidecar.
pub fn write_artifact(path: &Path, bytes: &[u8], provenance: &Provenance) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    provenance.write_for(path)
}
