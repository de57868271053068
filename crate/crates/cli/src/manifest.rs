//! Per-stage run manifests and artifact hash checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("hash mismatch for {}: manifest records {expected}, file hashes to {found}", path.display())]
    HashMismatch { path: PathBuf, expected: String, found: String },
    #[error("unreadable manifest {}: {reason}", path.display())]
    BadManifest { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_path: Option<String>,
    pub config_sha256: Option<String>,
    pub input_dir: String,
    pub output_dir: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    /// Paths relative to the run directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, ArtifactError> {
    let bytes = std::fs::read(path).map_err(|_| ArtifactError::MissingArtifact(path.to_path_buf()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn write(&self, stage_dir: &Path) -> anyhow::Result<()> {
        std::fs::write(stage_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Reads the manifest of a finished stage and re-hashes every output it lists.
    pub fn verify(run_dir: &Path, stage: &str) -> Result<Self, ArtifactError> {
        let path = run_dir.join(stage).join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|_| ArtifactError::MissingArtifact(path.clone()))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| ArtifactError::BadManifest { path: path.clone(), reason: e.to_string() })?;
        for (rel, expected) in &manifest.outputs {
            let file = run_dir.join(rel);
            let found = sha256_file(&file)?;
            if &found != expected {
                return Err(ArtifactError::HashMismatch { path: file, expected: expected.clone(), found });
            }
        }
        Ok(manifest)
    }
}
