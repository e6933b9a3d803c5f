//! Output directory, CSV formatting and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".pressure-lab.lock";

/// Full-precision float for CSV cells.
pub fn num(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub files: BTreeMap<String, FileEntry>,
}

/// Exclusive writer for one output directory.
///
/// Files left by earlier commands stay listed in the manifest as long as they exist.
pub struct OutputDir {
    dir: PathBuf,
    command: String,
    started: String,
    files: BTreeMap<String, FileEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl OutputDir {
    pub fn open(dir: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let lock = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Busy(dir.to_path_buf())),
            Err(e) => return Err(io(&lock)(e)),
        }
        let mut files = BTreeMap::new();
        if let Ok(text) = fs::read_to_string(dir.join(MANIFEST)) {
            if let Ok(old) = serde_json::from_str::<RunManifest>(&text) {
                files = old.files.into_iter().filter(|(name, _)| dir.join(name).is_file()).collect();
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            started: chrono::Utc::now().to_rfc3339(),
            files,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io(&path))?;
        self.files.insert(
            name.to_string(),
            FileEntry {
                sha256: hex::encode(Sha256::digest(bytes)),
                bytes: bytes.len() as u64,
                command: self.command.clone(),
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_vec_pretty(value).expect("report serializes");
        text.push(b'\n');
        self.write(name, &text)
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let path = self.dir.join(name);
        let csv_err = |e: csv::Error| io(&path)(std::io::Error::other(e));
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| io(&path)(std::io::Error::other(e.to_string())))?;
        self.write(name, &bytes)
    }

    /// Writes `manifest.json` and releases the directory.
    pub fn finish(self, config: &RunConfig) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            started: self.started.clone(),
            finished: chrono::Utc::now().to_rfc3339(),
            files: self.files.clone(),
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(io(&path))?;
        Ok(manifest)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK));
    }
}
