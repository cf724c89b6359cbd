use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use glvd::experiment::ExperimentConfig;
use glvd::fingerprint::fingerprint_bytes;

use crate::error::{CliError, CliResult};

pub const MANIFEST_FORMAT: &str = "glvd-run-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Files whose contents depend on wall-clock and are left out of output
/// fingerprints.
pub const TIMING_FILES: [&str; 2] = ["timing.csv", "sweep_timing.csv"];

/// Command-specific inputs that are not part of the experiment config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageArgs {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub views: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub trace: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub fingerprint: String,
}

/// Self-description of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub command: String,
    pub args: StageArgs,
    pub config: ExperimentConfig,
    pub config_fingerprint: String,
    pub workers: usize,
    pub corpus_fingerprint: Option<String>,
    /// Input artifacts and their content fingerprints.
    pub inputs: Vec<OutputFile>,
    /// Every output file except the manifest and timing tables.
    pub outputs: Vec<OutputFile>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("corrupt manifest {}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::validation(format!(
                "manifest {} has format `{}`, expected {MANIFEST_FORMAT}",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }
}

pub fn file_fingerprint(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(fingerprint_bytes(&bytes))
}

/// Fingerprints of all files under `root`, sorted by relative path.
pub fn output_fingerprints(root: &Path) -> CliResult<Vec<OutputFile>> {
    let mut files = Vec::new();
    collect(root, root, &mut files)?;
    files.sort();
    files
        .into_iter()
        .filter(|rel| rel != MANIFEST_FILE && !TIMING_FILES.iter().any(|t| rel.ends_with(t)))
        .map(|rel| {
            Ok(OutputFile {
                fingerprint: file_fingerprint(&root.join(&rel))?,
                path: rel,
            })
        })
        .collect()
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::runtime(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::runtime(format!("cannot list {}: {e}", dir.display())))?
            .path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}
