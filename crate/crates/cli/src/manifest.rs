//! Run manifests and staged, all-or-nothing output writing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clinpeft_core::util::{sha256_hex, write_atomic};
use clinpeft_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Every flag after defaults were applied.
    pub flags: serde_json::Value,
    pub seed: Option<u64>,
    pub config_hashes: BTreeMap<String, String>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Contract(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Collects a run's inputs and outputs. Outputs are held in memory and only
/// written by [`Run::finish`], so a failing command leaves nothing behind.
pub struct Run {
    manifest: RunManifest,
    outputs: Vec<(PathBuf, Vec<u8>)>,
}

impl Run {
    pub fn start(command: &str, flags: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                flags,
                seed,
                config_hashes: BTreeMap::new(),
                dataset_hashes: BTreeMap::new(),
                output_hashes: BTreeMap::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                started_at: now(),
                finished_at: String::new(),
            },
            outputs: Vec::new(),
        }
    }

    pub fn config<T: Serialize>(&mut self, name: &str, config: &T) -> Result<()> {
        let json = serde_json::to_string(config).map_err(|e| Error::Contract(e.to_string()))?;
        self.manifest
            .config_hashes
            .insert(name.to_string(), sha256_hex(json.as_bytes()));
        Ok(())
    }

    /// Reads an input file, recording its hash.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.manifest
            .dataset_hashes
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn output(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.outputs.push((path, bytes));
    }

    /// Writes every staged output, then the manifest at `manifest_path`
    /// (or to stderr when there is none).
    pub fn finish(mut self, manifest_path: Option<&Path>) -> Result<RunManifest> {
        for (path, bytes) in &self.outputs {
            self.manifest
                .output_hashes
                .insert(path.display().to_string(), sha256_hex(bytes));
        }
        self.manifest.finished_at = now();
        let json = to_json(&self.manifest)?;
        let mut dirs: Vec<&Path> = self
            .outputs
            .iter()
            .filter_map(|(p, _)| p.parent())
            .collect();
        dirs.extend(manifest_path.and_then(Path::parent));
        for dir in dirs.into_iter().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        for (path, bytes) in &self.outputs {
            write_atomic(path, bytes)?;
        }
        match manifest_path {
            Some(p) => write_atomic(p, json.as_bytes())?,
            None => eprintln!("{json}"),
        }
        Ok(self.manifest)
    }
}

/// `<file>.manifest.json` beside a single-file output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}
