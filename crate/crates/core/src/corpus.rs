//! On-disk image-text corpus shared by the generator, trainer and evaluator.
//!
//! A dataset directory holds:
//! - `meta.json`: name, feature dimension, class count, class names
//! - `pairs.jsonl`: one [`CorpusRecord`] per image
//! - `features.bin`: little-endian f64 rows, `visual_dim` values each; a
//!   record's RoI features start at `feature_row`

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, f64s_to_le_bytes, le_bytes_to_f64s, read_json, read_jsonl, to_jsonl, write_json};
use crate::model::VisualTokenSet;
use crate::tokenizer::{TokenSequence, Tokenizer};

pub const META_FILE: &str = "meta.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub visual_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub image_id: String,
    pub captions: Vec<String>,
    pub width: f64,
    pub height: f64,
    /// RoIs in detector-confidence order.
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
    pub feature_row: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_row: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<CorpusRecord>,
    /// Row-major `rows × visual_dim`.
    pub features: Vec<f64>,
}

/// One tokenized caption with its image, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub image_id: String,
    /// Index of the image within its dataset (or pool).
    pub image_index: usize,
    pub text: TokenSequence,
    pub visual: VisualTokenSet,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.meta.visual_dim;
        &self.features[r * d..(r + 1) * d]
    }

    /// Visual tokens of record `i`, keeping the first `max_rois` RoIs.
    pub fn visual(&self, i: usize, max_rois: usize) -> Result<VisualTokenSet> {
        let rec = &self.records[i];
        let d = self.meta.visual_dim;
        let o = rec.labels.len().min(max_rois);
        let start = rec.feature_row * d;
        let end = start + o * d;
        if end > self.features.len() {
            return Err(Error::Input(format!(
                "record {} points past the feature blob",
                rec.image_id
            )));
        }
        let global_feature = match rec.global_row {
            Some(r) if (r + 1) * d <= self.features.len() => Some(self.row(r).to_vec()),
            Some(_) => return Err(Error::Input(format!("record {} global row out of range", rec.image_id))),
            None => None,
        };
        let v = VisualTokenSet {
            features: self.features[start..end].to_vec(),
            visual_dim: d,
            class_labels: rec.labels[..o].to_vec(),
            boxes: rec.boxes[..o].to_vec(),
            image_size: (rec.width, rec.height),
            global_feature,
        };
        v.validate(self.meta.num_classes)?;
        Ok(v)
    }

    /// Every (caption, image) pair, captions tokenized to `max_text_len`.
    pub fn pairs(&self, tok: &Tokenizer, max_text_len: usize, max_rois: usize) -> Result<Vec<Pair>> {
        let mut out = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            let visual = self.visual(i, max_rois)?;
            for c in &rec.captions {
                out.push(Pair {
                    image_id: rec.image_id.clone(),
                    image_index: i,
                    text: tok.tokenize(c, max_text_len)?,
                    visual: visual.clone(),
                });
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.records.len() {
            self.visual(i, usize::MAX)?;
            if self.records[i].image_id.is_empty() {
                return Err(Error::Input(format!("record {i} has an empty image_id")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        atomic_write(&dir.join(FEATURES_FILE), &f64s_to_le_bytes(&self.features))?;
        atomic_write(&dir.join(PAIRS_FILE), to_jsonl(&self.records)?.as_bytes())?;
        write_json(&dir.join(META_FILE), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = read_json(&dir.join(META_FILE))?;
        let records: Vec<CorpusRecord> = read_jsonl(&dir.join(PAIRS_FILE))?;
        let fpath = dir.join(FEATURES_FILE);
        let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let ds = Self {
            meta,
            records,
            features: le_bytes_to_f64s(&bytes)?,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Concatenation of several datasets with the same feature layout.
    pub fn merged(name: &str, parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Config("nothing to merge".into()))?;
        let mut out = Dataset {
            meta: DatasetMeta {
                name: name.to_string(),
                ..first.meta.clone()
            },
            records: Vec::new(),
            features: Vec::new(),
        };
        for p in parts {
            if p.meta.visual_dim != first.meta.visual_dim || p.meta.num_classes != first.meta.num_classes {
                return Err(Error::Config(format!(
                    "dataset {} does not share the feature layout of {}",
                    p.meta.name, first.meta.name
                )));
            }
            let base = out.features.len() / first.meta.visual_dim;
            for r in &p.records {
                let mut r = r.clone();
                r.image_id = format!("{}/{}", p.meta.name, r.image_id);
                r.feature_row += base;
                r.global_row = r.global_row.map(|g| g + base);
                out.records.push(r);
            }
            out.features.extend_from_slice(&p.features);
        }
        Ok(out)
    }
}
