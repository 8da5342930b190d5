use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::error::Error;
use crate::json;

pub const LOCK_FILE: &str = ".shrinknet.lock";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub config_hash: String,
    /// Artifact name to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Last run of each subcommand, keyed by subcommand name.
pub type Manifest = BTreeMap<String, ManifestEntry>;

pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(Error::from)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// SHA-256 of a file, or of the sorted `(name, digest)` list of a directory.
    pub fn digest(&self, name: &str) -> Result<String, CliError> {
        Ok(digest_path(&self.root.join(name)).map_err(Error::from)?)
    }

    pub fn model_stems(&self) -> Result<Vec<String>, CliError> {
        let mut stems = Vec::new();
        for entry in std::fs::read_dir(&self.root).map_err(Error::from)? {
            let name = entry.map_err(Error::from)?.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(".nnzm") {
                stems.push(stem.to_string());
            }
        }
        stems.sort();
        Ok(stems)
    }

    pub fn record(&self, command: &str, config_hash: &str, inputs: &BTreeMap<String, String>, outputs: &[String]) -> Result<(), CliError> {
        let path = self.root.join(MANIFEST);
        let mut manifest: Manifest = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(Error::from)?,
            Err(_) => Manifest::new(),
        };
        let mut out = BTreeMap::new();
        for name in outputs {
            out.insert(name.clone(), self.digest(name)?);
        }
        manifest.insert(
            command.to_string(),
            ManifestEntry { config_hash: config_hash.to_string(), inputs: inputs.clone(), outputs: out },
        );
        json::write_sorted(path, &manifest)?;
        Ok(())
    }
}

fn digest_path(path: &Path) -> std::io::Result<String> {
    if path.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
        names.sort();
        let mut h = Sha256::new();
        for n in names {
            h.update(n.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(digest_path(&path.join(&n))?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    } else {
        Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
    }
}

/// Exclusive per-workspace lock, released on drop.
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(root: &Path) -> Result<Self, CliError> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(super::ConfigError(format!(
                "paths.workspace: {} is locked by another run (remove {LOCK_FILE} if stale)",
                root.display()
            )))),
            Err(e) => Err(Error::from(e).into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
