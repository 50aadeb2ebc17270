//! Provenance blocks, input digests and report writing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Parameter keys that name files. They are left out of the config hash so
/// that the same run in a different directory hashes the same.
const PATH_KEYS: [&str; 5] = ["data", "model", "weights", "adapter", "out"];

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config_sha256: String,
    /// SHA-256 of each input file, keyed by its role.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(seed: u64, params: &impl Serialize) -> Self {
        let mut value = serde_json::to_value(params).expect("parameters serialize");
        if let Value::Object(map) = &mut value {
            for key in PATH_KEYS {
                map.remove(key);
            }
        }
        let canonical = serde_json::json!({ "seed": seed, "params": value }).to_string();
        Self {
            tool: "lrag",
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_sha256: hex(&Sha256::digest(canonical.as_bytes())),
            inputs: BTreeMap::new(),
        }
    }

    /// Records the digest of `path` under `role`.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.insert(role.to_string(), hex(&Sha256::digest(&bytes)));
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_paths() {
        let a = Provenance::new(1, &serde_json::json!({"data": "/a", "k": 4}));
        let b = Provenance::new(1, &serde_json::json!({"data": "/b", "k": 4}));
        let c = Provenance::new(1, &serde_json::json!({"data": "/a", "k": 5}));
        let d = Provenance::new(2, &serde_json::json!({"data": "/a", "k": 4}));
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_ne!(a.config_sha256, c.config_sha256);
        assert_ne!(a.config_sha256, d.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);
    }
}
