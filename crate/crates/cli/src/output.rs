use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Output directory that writes every file through a temporary name and a
/// rename, and remembers what it wrote for the manifest.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Writes `bytes` to `name` (relative, may contain one directory level).
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = write_atomic(&self.root.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(path)
    }

    /// Runs `f` on an in-memory buffer and writes the result.
    pub fn write_with<E>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
    ) -> Result<PathBuf, CliError>
    where
        CliError: From<E>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Serializes `rows` as CSV with a header from the field names.
    pub fn write_rows<T: Serialize>(
        &mut self,
        name: &str,
        rows: &[T],
    ) -> Result<PathBuf, CliError> {
        self.write_with(name, |buf| write_rows(buf, rows))
    }

    /// Writes `manifest.json`. Lists every file written so far.
    pub fn finish(mut self, manifest: Manifest) -> Result<PathBuf, CliError> {
        let manifest = ManifestFile {
            files: std::mem::take(&mut self.files),
            ..ManifestFile::from(manifest)
        };
        self.write_json("manifest.json", &manifest)
    }
}

pub fn write_rows<T: Serialize>(buf: &mut Vec<u8>, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(buf);
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

/// Writes through `<name>.tmp` and renames, so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Run description recorded next to the outputs.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub effective_config: String,
    pub overrides: Vec<(String, String)>,
    pub results: serde_json::Value,
}

#[derive(Debug, Serialize)]
struct ManifestFile {
    command: String,
    version: &'static str,
    seed: u64,
    config_sha256: String,
    overrides: Vec<Override>,
    files: Vec<String>,
    results: serde_json::Value,
}

#[derive(Debug, Serialize)]
struct Override {
    key: String,
    value: String,
}

impl From<Manifest> for ManifestFile {
    fn from(m: Manifest) -> Self {
        Self {
            command: m.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: m.seed,
            config_sha256: sha256_hex(m.effective_config.as_bytes()),
            overrides: m
                .overrides
                .into_iter()
                .map(|(key, value)| Override { key, value })
                .collect(),
            files: Vec::new(),
            results: m.results,
        }
    }
}
