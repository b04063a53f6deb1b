//! Run manifests: what produced an artifact and from which inputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = concat!("usda ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileRef {
            path: path.display().to_string(),
            sha256: file_hash(path)?,
        })
    }
}

/// A checkpoint this run started from, with the manifest that produced it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub role: String,
    pub checkpoint: FileRef,
    pub manifest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub data: Vec<FileRef>,
    pub lineage: Vec<Lineage>,
    pub outputs: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = text_hash(&serde_json::to_string(&config)?);
        Ok(RunManifest {
            command: command.to_string(),
            config,
            config_hash,
            seed,
            data: Vec::new(),
            lineage: Vec::new(),
            outputs: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
        })
    }

    pub fn add_data(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("reading {}", path.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.sort();
            for p in entries.into_iter().filter(|p| p.is_file()) {
                self.data.push(FileRef::of(&p)?);
            }
        } else {
            self.data.push(FileRef::of(path)?);
        }
        Ok(())
    }

    pub fn add_lineage(
        &mut self,
        role: &str,
        checkpoint: &Path,
        manifest: Option<String>,
    ) -> Result<()> {
        self.lineage.push(Lineage {
            role: role.to_string(),
            checkpoint: FileRef::of(checkpoint)?,
            manifest,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Manifest path for an artifact that cannot carry its own reference.
pub fn sidecar(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
