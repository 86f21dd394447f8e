//! Run manifests: every artifact directory records the run name, effective
//! config, input lineage, and tool version that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::SystemConfig;
use crate::error::EmpatheiaError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Provenance record for one produced artifact directory. Contains no
/// timestamps so a rerun writes byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    pub command: String,
    pub tool_version: String,
    /// effective layered config, seeds included
    pub config: SystemConfig,
    /// named inputs this artifact consumed (prior checkpoints, corpus paths)
    pub lineage: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(run_name: &str, command: &str, config: &SystemConfig) -> Self {
        Self {
            run_name: run_name.to_string(),
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            lineage: BTreeMap::new(),
        }
    }

    pub fn with_input(mut self, key: &str, value: impl Into<String>) -> Self {
        self.lineage.insert(key.to_string(), value.into());
        self
    }

    /// Write into `dir` (created if needed); returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, EmpatheiaError> {
        std::fs::create_dir_all(dir).map_err(|e| EmpatheiaError::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| EmpatheiaError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, EmpatheiaError> {
        let text = std::fs::read_to_string(path).map_err(|e| EmpatheiaError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| EmpatheiaError::Parse(format!("manifest {}: {e}", path.display())))
    }
}

/// SHA-256 over every file in a directory tree: sorted relative paths mixed
/// with file bytes. Two directories with identical contents hash identically.
pub fn dir_checksum(dir: &Path) -> Result<String, EmpatheiaError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        let bytes = std::fs::read(dir.join(rel)).map_err(|e| EmpatheiaError::io(dir, e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), EmpatheiaError> {
    let entries = std::fs::read_dir(dir).map_err(|e| EmpatheiaError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| EmpatheiaError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("entry under root")
                .to_string_lossy()
                .into_owned();
            out.push(rel);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rewrite_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SystemConfig::default();
        let m = RunManifest::new("fixture-run", "train --stage coe", &cfg)
            .with_input("corpus", "fixtures/fixture8.jsonl")
            .with_input("checkpoint", "none");
        let path = m.write(dir.path()).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        let first = std::fs::read(&path).unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert_eq!(back.tool_version, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn checksum_tracks_content_not_location() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for root in [a.path(), b.path()] {
            std::fs::create_dir(root.join("sub")).unwrap();
            std::fs::write(root.join("x.txt"), b"alpha").unwrap();
            std::fs::write(root.join("sub/y.bin"), [1u8, 2, 3]).unwrap();
        }
        assert_eq!(dir_checksum(a.path()).unwrap(), dir_checksum(b.path()).unwrap());
        std::fs::write(b.path().join("x.txt"), b"beta!").unwrap();
        assert_ne!(dir_checksum(a.path()).unwrap(), dir_checksum(b.path()).unwrap());
    }

    #[test]
    fn checksum_separates_name_and_bytes() {
        // ("ab", "c") must not collide with ("a", "bc")
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        std::fs::write(a.path().join("f"), b"ab").unwrap();
        std::fs::write(a.path().join("g"), b"c").unwrap();
        std::fs::write(b.path().join("f"), b"a").unwrap();
        std::fs::write(b.path().join("g"), b"bc").unwrap();
        assert_ne!(dir_checksum(a.path()).unwrap(), dir_checksum(b.path()).unwrap());
    }

    #[test]
    fn missing_dir_is_io_error() {
        let err = dir_checksum(Path::new("/nonexistent/artifacts")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
