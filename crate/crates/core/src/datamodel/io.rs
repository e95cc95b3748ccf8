//! On-disk layout.
//!
//! A dataset directory holds `texts.json`, `manifest.json`, and a `bags/`
//! directory. Each bag is three files: `<id>.low.f32` and `<id>.high.f32`
//! (row-major little-endian `f32`) plus the `<id>.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Dataset, EncoderStub, FeatureBag, StubKind, TextHierarchy, GRID};
use crate::autograd::Mat;
use crate::error::{Error, Result};

pub fn f32_bytes(m: &Mat) -> Vec<u8> {
    m.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

pub fn mat_from_f32_bytes(bytes: &[u8], rows: usize, cols: usize) -> Option<Mat> {
    if bytes.len() != rows * cols * 4 {
        return None;
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Mat::from_shape_vec((rows, cols), data).ok()
}

/// Packs flags LSB-first into bytes.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Option<Vec<bool>> {
    if bytes.len() != len.div_ceil(8) {
        return None;
    }
    Some((0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_vec_pretty(value)?)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[allow(non_snake_case)]
pub struct BagSidecar {
    pub bag_id: String,
    pub N: usize,
    pub M: usize,
    pub D: usize,
    pub label: usize,
    /// Base64 of the LSB-first packed validity flags.
    pub validity: String,
}

pub fn save_bag(dir: &Path, bag: &FeatureBag) -> Result<()> {
    let sidecar = BagSidecar {
        bag_id: bag.bag_id.clone(),
        N: bag.n_low(),
        M: GRID,
        D: bag.dim(),
        label: bag.label,
        validity: B64.encode(pack_bits(bag.validity())),
    };
    write_file(&dir.join(format!("{}.low.f32", bag.bag_id)), f32_bytes(bag.low()))?;
    write_file(&dir.join(format!("{}.high.f32", bag.bag_id)), f32_bytes(bag.high()))?;
    write_json(&dir.join(format!("{}.json", bag.bag_id)), &sidecar)
}

pub fn load_bag(sidecar_path: &Path) -> Result<FeatureBag> {
    let sc: BagSidecar = read_json(sidecar_path)?;
    if sc.M != GRID {
        return Err(Error::format(sidecar_path, format!("M = {} but the grid has {GRID} cells", sc.M)));
    }
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let r = sc.N * sc.M;
    let bits = B64
        .decode(&sc.validity)
        .ok()
        .and_then(|b| unpack_bits(&b, r))
        .ok_or_else(|| Error::format(sidecar_path, "bad validity bitset"))?;
    let low_path = dir.join(format!("{}.low.f32", sc.bag_id));
    let high_path = dir.join(format!("{}.high.f32", sc.bag_id));
    let low = mat_from_f32_bytes(&read_file(&low_path)?, sc.N, sc.D)
        .ok_or_else(|| Error::format(&low_path, "size does not match sidecar"))?;
    let high = mat_from_f32_bytes(&read_file(&high_path)?, r, sc.D)
        .ok_or_else(|| Error::format(&high_path, "size does not match sidecar"))?;
    FeatureBag::new(sc.bag_id, sc.label, low, high, bits)
}

/// Loads every bag in `dir`, ordered by bag id.
pub fn load_bags(dir: &Path) -> Result<Vec<FeatureBag>> {
    let mut sidecars: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sidecars.sort();
    sidecars.iter().map(|p| load_bag(p)).collect()
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TextFile {
    pub num_classes: usize,
    pub parents_per_class: usize,
    pub children_per_parent: usize,
    pub base_dim: usize,
    pub context_len: usize,
    pub base_parent: String,
    pub base_child: String,
    pub context_low: String,
    pub context_high: String,
}

impl TextFile {
    pub fn from_hierarchy(h: &TextHierarchy) -> Self {
        let enc = |m: &Mat| B64.encode(f32_bytes(m));
        Self {
            num_classes: h.num_classes,
            parents_per_class: h.parents_per_class,
            children_per_parent: h.children_per_parent,
            base_dim: h.base_dim(),
            context_len: h.context_len(),
            base_parent: enc(&h.base_parent),
            base_child: enc(&h.base_child),
            context_low: enc(&h.context_low),
            context_high: enc(&h.context_high),
        }
    }

    pub fn into_hierarchy(self, path: &Path) -> Result<TextHierarchy> {
        let d = self.base_dim;
        let parents = self.num_classes * self.parents_per_class;
        let dec = |s: &str, rows: usize, name: &str| {
            B64.decode(s)
                .ok()
                .and_then(|b| mat_from_f32_bytes(&b, rows, d))
                .ok_or_else(|| Error::format(path, format!("field {name} is malformed")))
        };
        TextHierarchy::new(
            self.num_classes,
            self.parents_per_class,
            self.children_per_parent,
            dec(&self.base_parent, parents, "base_parent")?,
            dec(&self.base_child, parents * self.children_per_parent, "base_child")?,
            dec(&self.context_low, self.context_len, "context_low")?,
            dec(&self.context_high, self.context_len, "context_high")?,
        )
    }
}

pub fn save_texts(path: &Path, h: &TextHierarchy) -> Result<()> {
    write_json(path, &TextFile::from_hierarchy(h))
}

pub fn load_texts(path: &Path) -> Result<TextHierarchy> {
    let file: TextFile = read_json(path)?;
    file.into_hierarchy(path)
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dim: usize,
    pub stub: StubKind,
    pub num_bags: usize,
    /// Generator settings when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<serde_json::Value>,
}

pub fn save_dataset(dir: &Path, ds: &Dataset, synth: Option<serde_json::Value>) -> Result<()> {
    for bag in &ds.bags {
        save_bag(&dir.join("bags"), bag)?;
    }
    save_texts(&dir.join("texts.json"), &ds.texts)?;
    let manifest = DatasetManifest {
        dim: ds.dim(),
        stub: ds.stub_kind,
        num_bags: ds.bags.len(),
        synth,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let texts = load_texts(&dir.join("texts.json"))?;
    let bags = load_bags(&dir.join("bags"))?;
    if bags.len() != manifest.num_bags {
        return Err(Error::format(
            dir,
            format!("manifest lists {} bags, found {}", manifest.num_bags, bags.len()),
        ));
    }
    let stub = EncoderStub::build(manifest.stub, texts.base_dim(), manifest.dim)?;
    let ds = Dataset {
        bags,
        texts,
        stub,
        stub_kind: manifest.stub,
    };
    ds.validate()?;
    Ok(ds)
}
