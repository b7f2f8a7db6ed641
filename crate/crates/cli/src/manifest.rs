//! Run manifests and atomic file output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const VERSION: &str = concat!("stdim ", env!("CARGO_PKG_VERSION"));

/// Everything needed to re-run one command: the canonical config text plus
/// the identity of every input and output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Canonical `key = value` text, see [`crate::config::RunConfig::to_kv`].
    pub config: String,
    pub dataset_hash: Option<String>,
    /// Input paths other than the dataset (checkpoints, reports).
    pub inputs: Vec<String>,
    pub checkpoints: Vec<String>,
    pub reports: Vec<String>,
    /// Any other files written, e.g. datasets and training logs.
    pub outputs: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: String) -> Self {
        Self {
            command: command.into(),
            version: VERSION.into(),
            config,
            dataset_hash: None,
            inputs: Vec::new(),
            checkpoints: Vec::new(),
            reports: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
