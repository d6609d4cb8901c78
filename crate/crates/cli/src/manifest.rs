//! Run manifests and atomic artifact writes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Written next to every artifact: enough to rerun the command that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path to hex SHA-256 of its contents (directories are not hashed).
    pub inputs: BTreeMap<String, Option<String>>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub elapsed_seconds: f64,
    pub tool_version: String,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                argv: std::env::args().collect(),
                config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
                seeds: Vec::new(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
                elapsed_seconds: 0.0,
                tool_version: env!("CARGO_PKG_VERSION").into(),
            },
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seeds.push(seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        let hash = path.is_file().then(|| file_hash(path).ok()).flatten();
        self.manifest.inputs.insert(path.display().to_string(), hash);
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.outputs.push(path.display().to_string());
        self
    }

    /// Writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<RunManifest> {
        self.manifest.elapsed_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(path, text.as_bytes())?;
        Ok(self.manifest)
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Manifest location for an artifact: `<file>.manifest.json`, or
/// `run.manifest.json` inside an output directory.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        return artifact.join("run.manifest.json");
    }
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(inpaint_service::MANIFEST_SUFFIX);
    artifact.with_file_name(name)
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).with_context(|| format!("creating a temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
