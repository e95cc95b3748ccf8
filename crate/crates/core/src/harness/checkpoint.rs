//! Checkpoints: a flat little-endian `f64` blob plus a JSON manifest that
//! lists each tensor's name, shape, dtype and byte offset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::datamodel::io::{read_file, read_json, write_file, write_json};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("bin"), base.with_extension("json"))
}

/// Writes `<base>.bin` and `<base>.json`.
pub fn save_checkpoint<'a>(
    base: &Path,
    tensors: impl IntoIterator<Item = (String, &'a Mat)>,
    meta: serde_json::Value,
) -> Result<()> {
    let (bin, json) = paths(base);
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name,
            shape: [m.nrows(), m.ncols()],
            dtype: "f64".into(),
            offset: blob.len(),
        });
        blob.extend(m.iter().flat_map(|x| x.to_le_bytes()));
    }
    write_file(&bin, blob)?;
    let manifest = CheckpointManifest {
        blob: bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        tensors: entries,
        meta,
    };
    write_json(&json, &manifest)
}

/// Reads every tensor of a checkpoint, in manifest order.
pub fn load_checkpoint(base: &Path) -> Result<(Vec<(String, Mat)>, CheckpointManifest)> {
    let (_, json) = paths(base);
    let manifest: CheckpointManifest = read_json(&json)?;
    let bin = json.with_file_name(&manifest.blob);
    let blob = read_file(&bin)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        if t.dtype != "f64" {
            return Err(Error::format(&json, format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
        }
        let len = t.shape[0] * t.shape[1] * 8;
        let bytes = blob
            .get(t.offset..t.offset + len)
            .ok_or_else(|| Error::format(&bin, format!("tensor {} runs past the end of the blob", t.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), data).map_err(|e| Error::format(&bin, e.to_string()))?;
        out.push((t.name.clone(), m));
    }
    Ok((out, manifest))
}

/// Copies loaded tensors into `targets` by name; every target must be found
/// with a matching shape.
pub fn restore<'a>(targets: impl IntoIterator<Item = (String, &'a mut Mat)>, loaded: &[(String, Mat)]) -> Result<()> {
    for (name, dst) in targets {
        let src = loaded
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
        if src.dim() != dst.dim() {
            return Err(Error::Shape(format!("tensor {name}: checkpoint {:?} vs model {:?}", src.dim(), dst.dim())));
        }
        dst.assign(src);
    }
    Ok(())
}
