//! Run manifests written next to every output artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("GPQ_GIT_DESCRIBE"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: PathBuf,
    pub bytes: u64,
}

impl FileEntry {
    /// Records the canonical path so the manifest validates from any
    /// working directory.
    pub fn stat(path: &Path) -> Result<Self> {
        let path = fs::canonicalize(path).with_context(|| format!("cannot stat {}", path.display()))?;
        let bytes = fs::metadata(&path)
            .with_context(|| format!("cannot stat {}", path.display()))?
            .len();
        Ok(Self { path, bytes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, Value>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            config: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.config
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileEntry::stat(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileEntry::stat(path)?);
        Ok(())
    }

    /// `<artifact>.manifest.json`
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.as_os_str().to_os_string();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    /// Writes the manifest next to the first output.
    pub fn write(&self) -> Result<PathBuf> {
        let Some(first) = self.outputs.first() else {
            bail!("manifest has no outputs");
        };
        let path = Self::path_for(&first.path);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that every recorded file exists with the recorded size.
    pub fn validate(&self) -> Result<()> {
        if self.version.is_empty() || self.command.is_empty() {
            bail!("manifest lacks command or version");
        }
        for entry in self.inputs.iter().chain(&self.outputs) {
            let actual = FileEntry::stat(&entry.path)?;
            if actual.bytes != entry.bytes {
                bail!(
                    "{} is {} bytes, manifest records {}",
                    entry.path.display(),
                    actual.bytes,
                    entry.bytes
                );
            }
        }
        Ok(())
    }
}
