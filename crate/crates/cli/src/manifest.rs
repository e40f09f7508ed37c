//! Run manifest: everything needed to re-run a command bit-reproducibly on
//! the same machine. Written to the output directory before any work
//! starts, so even an interrupted run records what it was doing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, serde::Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, serde::Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &BTreeMap<String, String>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let mut hex = String::with_capacity(64);
        for byte in hasher.finalize() {
            hex.push_str(&format!("{byte:02x}"));
        }
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: hex,
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn declare_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Creates the output directory and writes `manifest.json` into it.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(out_dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
        let path = out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn manifest_records_checksums_and_writes_json() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.txt");
        fs::File::create(&input)
            .unwrap()
            .write_all(b"hello\n")
            .unwrap();
        let mut manifest = RunManifest::new("evaluate", 7, &BTreeMap::new());
        manifest.record_input(&input).unwrap();
        manifest.declare_output(&dir.path().join("report.txt"));
        let path = manifest.write(dir.path()).unwrap();
        let raw = fs::read_to_string(path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&raw).unwrap();
        assert_eq!(value["command"], "evaluate");
        assert_eq!(value["seed"], 7);
        assert_eq!(value["inputs"][0]["bytes"], 6);
        // SHA-256 of "hello\n".
        assert_eq!(
            value["inputs"][0]["sha256"],
            "5891b5b522d5df086d0ff0b110fbd9d21bb4fc7163af34d08286a2e846f6be03"
        );
        assert!(manifest.record_input(Path::new("/missing")).is_err());
    }
}
