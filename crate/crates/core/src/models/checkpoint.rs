//! Checkpoints: a JSON manifest of (name, shape, dtype, byte offset) entries
//! next to a flat little-endian `f64` blob.

use std::path::{Path, PathBuf};

use datarater_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Inner,
    Rater,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: ModelKind,
    config: ModelConfig,
    blob: String,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: Params,
}

const FORMAT: &str = "datarater-params";

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest, should end in `.json`) and the blob beside it
/// with a `.bin` extension.
pub fn save_checkpoint(
    path: &Path,
    kind: ModelKind,
    config: &ModelConfig,
    params: &Params,
) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(params.num_params() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        tensors.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        kind,
        config: config.clone(),
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        tensors,
    };
    std::fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            m.format, m.version
        )));
    }
    let blob = path.with_file_name(&m.blob);
    let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut names = Vec::with_capacity(m.tensors.len());
    let mut tensors = Vec::with_capacity(m.tensors.len());
    for e in m.tensors {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {} has unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the blob", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(e.shape, data)?);
        names.push(e.name);
    }
    Ok(Checkpoint {
        kind: m.kind,
        config: m.config,
        params: Params { names, tensors },
    })
}
