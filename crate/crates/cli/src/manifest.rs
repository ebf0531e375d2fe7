//! `manifest.json`: what produced an output directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the effective (resolved) configuration JSON.
    pub config_sha256: Option<String>,
    /// Git-style object hashes (`sha256("blob <len>\0" + content)`) of inputs.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            tool: "birl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(path.display().to_string(), blob_hash(&bytes));
        Ok(())
    }

    /// Hashes every regular file in `dir` except the manifest and writes it.
    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        let mut names: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST)
            .collect();
        names.sort();
        for n in names {
            let bytes = std::fs::read(dir.join(&n))?;
            self.outputs.insert(n, sha256_hex(&bytes));
        }
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digests() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        // differs from the raw digest because of the object header
        assert_ne!(blob_hash(b"abc"), sha256_hex(b"abc"));
        assert_eq!(blob_hash(b"abc"), sha256_hex(b"blob 3\0abc"));
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n1\n").unwrap();
        Manifest::new("test").finish(dir.path()).unwrap();
        let m: Manifest = serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(m.outputs["a.csv"], sha256_hex(b"x\n1\n"));
    }
}
