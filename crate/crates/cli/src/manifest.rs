//! Run manifests. Every command writes its outputs into
//! `<root>/<command>-<digest>` where the digest covers the command, its
//! settings, the code version and the contents of every input file, so a
//! rerun with identical inputs lands in the same directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Code version from `git describe`, or the package version outside a
/// repository.
pub fn code_version() -> &'static str {
    env!("TDPCFG_VERSION")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).at(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seeds: Vec<u64>,
    /// Command-line settings other than paths.
    pub settings: BTreeMap<String, String>,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Snapshot of the resolved configuration file, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    /// Files written into the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: code_version().to_string(),
            seeds: Vec::new(),
            settings: BTreeMap::new(),
            inputs: BTreeMap::new(),
            config: None,
            outputs: Vec::new(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.settings.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(self)
    }

    /// Digest of everything except the output list.
    pub fn digest(&self) -> String {
        let mut keyed = self.clone();
        keyed.outputs.clear();
        sha256_hex(toml::to_string(&keyed).expect("manifest serializes").as_bytes())
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-{}", self.command, &self.digest()[..16]))
    }
}

/// An open run directory collecting outputs for its manifest.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    pub fn create(root: &Path, manifest: RunManifest) -> Result<Self> {
        let dir = manifest.run_dir(root);
        fs::create_dir_all(&dir).at(&dir)?;
        Ok(Self { dir, manifest })
    }

    pub fn digest(&self) -> String {
        self.manifest.digest()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers `name` as an output and returns its full path.
    pub fn output(&mut self, name: &str) -> PathBuf {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.output(name);
        fs::write(&path, contents).at(&path)?;
        Ok(path)
    }

    pub fn finish(self) -> Result<RunOutput> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = toml::to_string(&self.manifest).expect("manifest serializes");
        fs::write(&path, text).at(&path)?;
        Ok(RunOutput { dir: self.dir, manifest: self.manifest })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}
