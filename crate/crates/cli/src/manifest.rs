use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable recorded in every manifest. Execution is single
/// threaded, so results are reproducible whether or not it is set.
pub const DETERMINISTIC_ENV: &str = "COSEG_DETERMINISTIC";

/// Provenance record written next to the outputs of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub artifacts: Vec<PathBuf>,
    pub toolkit_version: String,
    pub deterministic: bool,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        let now = Utc::now();
        RunManifest {
            command: command.to_string(),
            config_hash: None,
            seeds: BTreeMap::new(),
            started_at: now,
            finished_at: now,
            artifacts: Vec::new(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            deterministic: std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v != "0" && !v.is_empty()),
        }
    }

    pub fn finish(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_at = Utc::now();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
        }
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
    }
}

/// SHA-256 of the compact JSON serialization with object keys sorted, so
/// the hash does not depend on key order in the source file.
pub fn config_hash(value: &serde_json::Value) -> String {
    let canonical = canonicalize(value).to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn canonicalize(value: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, Value> = map.iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}
