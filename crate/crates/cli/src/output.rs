use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

/// Files a command produced, hashed into `manifest.json` at the end.
pub struct Manifest {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, path: impl Into<PathBuf>) {
        self.files.push(path.into());
    }

    /// Writes `<root>/manifest.json` listing each file relative to `root`
    /// with its SHA-256 and size.
    pub fn write(mut self, command: &str) -> CliResult<PathBuf> {
        self.files.sort();
        self.files.dedup();
        let mut entries = Vec::with_capacity(self.files.len());
        for f in &self.files {
            let bytes = fs::read(f).map_err(|e| io_err(f, e))?;
            let rel = f.strip_prefix(&self.root).unwrap_or(f);
            entries.push(json!({
                "path": rel.to_string_lossy(),
                "sha256": hex::encode(Sha256::digest(&bytes)),
                "bytes": bytes.len(),
            }));
        }
        let doc = json!({ "command": command, "files": Value::Array(entries) });
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>, manifest: &mut Manifest) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    manifest.add(path);
    Ok(())
}
