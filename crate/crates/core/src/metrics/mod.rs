//! Caption metrics: CIDEr and word mover's distance, plus the report CSV.

pub mod cider;
pub mod wmd;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cider::{cider_per_image, cider_score};
pub use wmd::{
    wmd_distance, wmd_similarity_per_image, wmd_similarity_report, wmd_transport, TransportPlan, WordEmbeddings,
};

use crate::error::{Error, Result};
use crate::text::{CaptionItem, Sentence};

/// Reference captions per image; every image has at least one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReferenceSet {
    refs: BTreeMap<String, Vec<Sentence>>,
}

impl ReferenceSet {
    pub fn new(refs: BTreeMap<String, Vec<Sentence>>) -> Result<Self> {
        if let Some((id, _)) = refs.iter().find(|(_, r)| r.is_empty()) {
            return Err(Error::Data(format!("image {id} has no reference captions")));
        }
        Ok(ReferenceSet { refs })
    }

    pub fn from_items(items: &[&CaptionItem]) -> Result<Self> {
        Self::new(crate::text::dataset::references(items))
    }

    pub fn get(&self, image_id: &str) -> Option<&[Sentence]> {
        self.refs.get(image_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Sentence])> {
        self.refs.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// A corpus-level metric value with the number of images it averages over
/// and the number left out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub n_images: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub split: String,
    pub value: f64,
    pub n_images: usize,
    pub n_skipped: usize,
}

impl ReportRow {
    pub fn new(metric: &str, split: &str, v: MetricValue) -> Self {
        ReportRow {
            metric: metric.into(),
            split: split.into(),
            value: v.value,
            n_images: v.n_images,
            n_skipped: v.n_skipped,
        }
    }
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
