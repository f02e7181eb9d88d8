//! Artifact writing: CSV, JSON and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use beadstring::model::{Profile, SampledFunction};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub output_dir: String,
    pub artifacts: Vec<Artifact>,
}

pub struct Writer {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Writer {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Writer { dir: dir.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, data).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
        self.artifacts.push(Artifact { file: name.to_string(), sha256: hex(&Sha256::digest(data)) });
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.bytes(name, s.as_bytes())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::numerical(format!("serialising {name}: {e}")))?;
        s.push('\n');
        self.bytes(name, s.as_bytes())
    }

    pub fn control(&mut self, name: &str, f: &SampledFunction) -> Result<(), CliError> {
        let rows = f.values.iter().enumerate().map(|(i, &v)| vec![num(f.abscissa(i)), num(v)]);
        self.csv(name, &["t", "f"], rows)
    }

    pub fn state(&mut self, name: &str, u: &Profile, v: &Profile) -> Result<(), CliError> {
        let mut rows = Vec::new();
        for (j, (su, sv)) in u.segments.iter().zip(&v.segments).enumerate() {
            for (i, (&a, &b)) in su.values.iter().zip(&sv.values).enumerate() {
                rows.push(vec![j.to_string(), num(su.abscissa(i)), num(a), num(b)]);
            }
        }
        self.csv(name, &crate::inputs::STATE_HEADER, rows)
    }

    /// Writes `manifest.json`; artifacts are listed by file name.
    pub fn finish(mut self, command: &str, config: &Path, parameters: BTreeMap<String, serde_json::Value>) -> Result<RunManifest, CliError> {
        self.artifacts.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = RunManifest {
            command: command.to_string(),
            config: config.display().to_string(),
            parameters,
            output_dir: self.dir.display().to_string(),
            artifacts: self.artifacts,
        };
        let mut s = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::numerical(e.to_string()))?;
        s.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, s).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
        Ok(manifest)
    }
}
