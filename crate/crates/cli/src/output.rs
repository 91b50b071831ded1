//! Run directories: CSV and file writers, content hashes and the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of `bytes` framed like a git blob object, with SHA-256.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Renders rows as CSV: comma separated, header row, LF endings.
pub fn csv_bytes<R: Serialize>(rows: &[R]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Input(e.to_string()))
}

/// CSV from a header and pre-formatted string records.
pub fn csv_records(header: &[&str], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::Input(e.to_string()))
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    facts: &'a BTreeMap<String, serde_json::Value>,
}

/// One command's output directory. Files are written as they are
/// produced; the manifest at the end lists every output with its hash.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    facts: BTreeMap<String, serde_json::Value>,
}

impl RunDir {
    pub fn create(path: &Path, command: &str) -> CliResult<Self> {
        std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            command: command.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            facts: BTreeMap::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.file(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> CliResult<()> {
        let bytes = csv_bytes(rows)?;
        self.write(name, &bytes)
    }

    /// Registers a file some other writer already put in the directory.
    pub fn track(&mut self, name: &str) -> CliResult<()> {
        let p = self.file(name);
        let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        self.outputs.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn input_file(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// A generated input identified by its content hash.
    pub fn input_hash(&mut self, label: &str, hash: &str) {
        self.inputs.insert(label.into(), hash.into());
    }

    pub fn fact(&mut self, key: &str, value: impl Serialize) {
        self.facts.insert(
            key.into(),
            serde_json::to_value(value).expect("facts serialize"),
        );
    }

    /// Writes the resolved config and the manifest.
    pub fn finish(mut self, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
        let resolved = cfg.to_json();
        self.write("config.resolved.json", resolved.as_bytes())?;
        let entries = |m: &BTreeMap<String, String>| {
            m.iter()
                .map(|(path, sha256)| FileEntry {
                    path: path.clone(),
                    sha256: sha256.clone(),
                })
                .collect()
        };
        let manifest = Manifest {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: git_blob_hash(resolved.as_bytes()),
            seed: cfg.seed,
            inputs: entries(&self.inputs),
            outputs: entries(&self.outputs),
            facts: &self.facts,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let p = self.file("manifest.json");
        std::fs::write(&p, json).map_err(|e| CliError::io(&p, e))?;
        Ok(self.path)
    }
}

/// Reads a CSV into its header and string records.
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

/// Column `name` parsed as numbers; cells that do not parse become NaN.
pub fn column(header: &[String], rows: &[Vec<String>], name: &str) -> CliResult<Vec<f64>> {
    let j = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Input(format!("missing column {name}")))?;
    Ok(rows
        .iter()
        .map(|r| r.get(j).and_then(|c| c.parse().ok()).unwrap_or(f64::NAN))
        .collect())
}

pub fn text_column(header: &[String], rows: &[Vec<String>], name: &str) -> CliResult<Vec<String>> {
    let j = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Input(format!("missing column {name}")))?;
    Ok(rows
        .iter()
        .map(|r| r.get(j).cloned().unwrap_or_default())
        .collect())
}
