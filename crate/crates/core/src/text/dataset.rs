use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::preprocess::{preprocess_sentence, Sentence};
use crate::error::{Error, Result};

pub const FEATURES_MAGIC: &[u8; 4] = b"IMGF";
/// Width of the image feature vectors the full-scale models expect.
pub const DEFAULT_FEATURE_DIM: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionItem {
    pub image_id: String,
    pub split: Split,
    pub captions: Vec<Sentence>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptionDataset {
    pub items: Vec<CaptionItem>,
}

#[derive(Deserialize, Serialize)]
struct RawItem {
    image_id: String,
    split: Split,
    captions: Vec<String>,
}

impl CaptionDataset {
    pub fn new(items: Vec<CaptionItem>) -> Result<Self> {
        let ds = CaptionDataset { items };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for item in &self.items {
            if item.captions.is_empty() {
                return Err(Error::Data(format!("image {} has no captions", item.image_id)));
            }
            if !ids.insert(item.image_id.as_str()) {
                return Err(Error::Data(format!("image id {} appears twice", item.image_id)));
            }
        }
        Ok(())
    }

    /// Parses JSONL `{"image_id", "split", "captions": [raw strings]}` and
    /// preprocesses each caption.
    pub fn from_jsonl_str(text: &str, origin: &Path) -> Result<Self> {
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawItem = serde_json::from_str(line)
                .map_err(|e| Error::format(origin, format!("line {}: {e}", n + 1)))?;
            let captions: Vec<Sentence> = raw.captions.iter().filter_map(|c| preprocess_sentence(c)).collect();
            items.push(CaptionItem {
                image_id: raw.image_id,
                split: raw.split,
                captions,
            });
        }
        Self::new(items)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl_str(&text, path)
    }

    /// Writes captions as space-joined preprocessed text.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for item in &self.items {
            let raw = RawItem {
                image_id: item.image_id.clone(),
                split: item.split,
                captions: item.captions.iter().map(Sentence::to_text).collect(),
            };
            out.push_str(&serde_json::to_string(&raw)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&CaptionItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn captions(&self, split: Split) -> impl Iterator<Item = &Sentence> {
        self.items
            .iter()
            .filter(move |i| i.split == split)
            .flat_map(|i| i.captions.iter())
    }
}

/// Precomputed image feature rows keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    dim: usize,
    rows: Vec<f32>,
    index: BTreeMap<String, usize>,
}

/// Sidecar path holding the image id to row index map.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl ImageFeatures {
    pub fn new(dim: usize, rows: Vec<f32>, index: BTreeMap<String, usize>) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::Data(format!("{} values is not a multiple of dim {dim}", rows.len())));
        }
        let n = rows.len() / dim;
        if let Some((id, &r)) = index.iter().find(|(_, &r)| r >= n) {
            return Err(Error::Data(format!("image {id} points at row {r} of {n}")));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(ImageFeatures { dim, rows, index })
    }

    pub fn from_map(dim: usize, map: &BTreeMap<String, Vec<f32>>) -> Result<Self> {
        let mut rows = Vec::with_capacity(map.len() * dim);
        let mut index = BTreeMap::new();
        for (i, (id, v)) in map.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Data(format!("feature row for {id} has length {}", v.len())));
            }
            rows.extend_from_slice(v);
            index.insert(id.clone(), i);
        }
        Self::new(dim, rows, index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn get(&self, image_id: &str) -> Option<&[f32]> {
        self.index
            .get(image_id)
            .map(|&r| &self.rows[r * self.dim..(r + 1) * self.dim])
    }

    pub fn require(&self, image_id: &str) -> Result<&[f32]> {
        self.get(image_id)
            .ok_or_else(|| Error::Data(format!("no feature row for image {image_id}")))
    }

    /// Checks that every dataset item resolves to a row.
    pub fn check_covers(&self, ds: &CaptionDataset) -> Result<()> {
        for item in &ds.items {
            self.require(&item.image_id)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.rows.len() * 4);
        out.extend_from_slice(FEATURES_MAGIC);
        out.extend_from_slice(&(self.n_rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string(&self.index)?;
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != FEATURES_MAGIC {
            return Err(Error::format(path, "missing IMGF header"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + n * dim * 4 {
            return Err(Error::format(path, format!("expected {n} rows of {dim} floats")));
        }
        let rows = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let index: BTreeMap<String, usize> = serde_json::from_str(&text)?;
        Self::new(dim, rows, index).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }
}

/// Groups captions per image, e.g. to use as CIDEr/WMD references.
pub fn references(items: &[&CaptionItem]) -> BTreeMap<String, Vec<Sentence>> {
    items
        .iter()
        .map(|i| (i.image_id.clone(), i.captions.clone()))
        .collect()
}
