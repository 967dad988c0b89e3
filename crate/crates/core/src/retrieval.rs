//! Cross-modal retrieval evaluation: exhaustive scoring and Recall@K.
//!
//! Ranks are computed with ties broken towards the lower index: candidate `j`
//! outranks `i` when `s[j] > s[i]`, or `s[j] == s[i]` and `j < i`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, VisualTokenSet};
use crate::par::Exec;
use crate::tokenizer::{TokenSequence, Tokenizer};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPool {
    pub images: Vec<VisualTokenSet>,
    pub captions: Vec<TokenSequence>,
    /// Ground-truth image of each caption.
    pub caption_image: Vec<usize>,
}

impl EvalPool {
    pub fn from_dataset(ds: &Dataset, tok: &Tokenizer, max_text_len: usize, max_rois: usize) -> Result<Self> {
        let mut pool = EvalPool {
            images: Vec::with_capacity(ds.len()),
            captions: Vec::new(),
            caption_image: Vec::new(),
        };
        for (i, rec) in ds.records.iter().enumerate() {
            pool.images.push(ds.visual(i, max_rois)?);
            for c in &rec.captions {
                pool.captions.push(tok.tokenize(c, max_text_len)?);
                pool.caption_image.push(i);
            }
        }
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.captions.is_empty() {
            return Err(Error::Input("evaluation pool is empty".into()));
        }
        if self.captions.len() != self.caption_image.len() {
            return Err(Error::Input(
                "every caption needs exactly one ground-truth image".into(),
            ));
        }
        if let Some(&bad) = self.caption_image.iter().find(|&&i| i >= self.images.len()) {
            return Err(Error::Index(format!(
                "caption points at image {bad} of {}",
                self.images.len()
            )));
        }
        Ok(())
    }
}

/// `images × captions` matching scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub images: usize,
    pub captions: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(images: usize, captions: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != images * captions {
            return Err(Error::Dim(format!(
                "{} scores for a {images}×{captions} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix holds a non-finite entry".into()));
        }
        Ok(Self { images, captions, data })
    }

    pub fn get(&self, image: usize, caption: usize) -> f64 {
        self.data[image * self.captions + caption]
    }
}

/// Scores every (image, caption) pair with the eval-mode matching logit.
/// Work is split into chunks of `batch_size` pairs; the result does not
/// depend on the chunking or on `exec`.
pub fn score_all(model: &Model, pool: &EvalPool, batch_size: usize, exec: Exec) -> Result<ScoreMatrix> {
    pool.validate()?;
    let (ni, nc) = (pool.images.len(), pool.captions.len());
    let bs = batch_size.max(1);
    let chunks = (ni * nc).div_ceil(bs);
    let parts = exec.map_range(chunks, |c| -> Result<Vec<f64>> {
        (c * bs..((c + 1) * bs).min(ni * nc))
            .map(|k| model.score_pair(&pool.captions[k % nc], &pool.images[k / nc]))
            .collect()
    });
    let mut data = Vec::with_capacity(ni * nc);
    for p in parts {
        data.extend(p?);
    }
    ScoreMatrix::new(ni, nc, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalDirection {
    /// Caption query, rank images.
    ImageRetrieval,
    /// Image query, rank captions.
    SentenceRetrieval,
}

impl RetrievalDirection {
    pub fn label(self) -> &'static str {
        match self {
            RetrievalDirection::ImageRetrieval => "image_retrieval",
            RetrievalDirection::SentenceRetrieval => "sentence_retrieval",
        }
    }
}

/// Number of candidates ranked above candidate `i` in `scores`.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, i: usize, si: f64) -> usize {
    scores
        .enumerate()
        .filter(|&(j, sj)| sj > si || (sj == si && j < i))
        .count()
}

pub fn recall_at_k(m: &ScoreMatrix, caption_image: &[usize], k: usize, dir: RetrievalDirection) -> Result<f64> {
    if caption_image.len() != m.captions {
        return Err(Error::Dim(format!(
            "{} ground-truth entries for {} captions",
            caption_image.len(),
            m.captions
        )));
    }
    let candidates = match dir {
        RetrievalDirection::ImageRetrieval => m.images,
        RetrievalDirection::SentenceRetrieval => m.captions,
    };
    if k == 0 || k > candidates {
        return Err(Error::Config(format!("K = {k} outside 1..={candidates}")));
    }
    if let Some(&bad) = caption_image.iter().find(|&&i| i >= m.images) {
        return Err(Error::Index(format!("caption points at image {bad} of {}", m.images)));
    }
    let hits = match dir {
        RetrievalDirection::ImageRetrieval => (0..m.captions)
            .filter(|&c| {
                let gt = caption_image[c];
                let col = (0..m.images).map(|i| m.get(i, c));
                rank_of(col, gt, m.get(gt, c)) < k
            })
            .count(),
        RetrievalDirection::SentenceRetrieval => (0..m.images)
            .filter(|&i| {
                let row = &m.data[i * m.captions..(i + 1) * m.captions];
                (0..m.captions)
                    .filter(|&c| caption_image[c] == i)
                    .any(|c| rank_of(row.iter().copied(), c, row[c]) < k)
            })
            .count(),
    };
    let queries = match dir {
        RetrievalDirection::ImageRetrieval => m.captions,
        RetrievalDirection::SentenceRetrieval => m.images,
    };
    Ok(hits as f64 / queries as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub direction: RetrievalDirection,
    #[serde(rename = "K")]
    pub k: usize,
    pub recall: f64,
    pub pool_size: usize,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn recall(&self, dir: RetrievalDirection, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.direction == dir && r.k == k)
            .map(|r| r.recall)
    }

    /// Aligned table: one line per direction, one column per K.
    pub fn to_table(&self) -> String {
        let mut ks: Vec<usize> = self.rows.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut out = format!("{:<20}", "direction");
        for k in &ks {
            let _ = write!(out, "{:>8}", format!("R@{k}"));
        }
        out.push('\n');
        for dir in [
            RetrievalDirection::SentenceRetrieval,
            RetrievalDirection::ImageRetrieval,
        ] {
            if !self.rows.iter().any(|r| r.direction == dir) {
                continue;
            }
            let _ = write!(out, "{:<20}", dir.label());
            for &k in &ks {
                match self.recall(dir, k) {
                    Some(r) => {
                        let _ = write!(out, "{:>8.1}", 100.0 * r);
                    }
                    None => out.push_str(&format!("{:>8}", "-")),
                }
            }
            out.push('\n');
        }
        if let Some(r) = self.rows.first() {
            let _ = writeln!(out, "pool {} images, checkpoint {}", r.pool_size, r.checkpoint);
        }
        out
    }
}

/// Both directions at every K. Ks larger than a direction's candidate count
/// are an error.
pub fn eval_report(m: &ScoreMatrix, caption_image: &[usize], ks: &[usize], checkpoint: &str) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for dir in [
        RetrievalDirection::ImageRetrieval,
        RetrievalDirection::SentenceRetrieval,
    ] {
        for &k in ks {
            rows.push(ReportRow {
                direction: dir,
                k,
                recall: recall_at_k(m, caption_image, k, dir)?,
                pool_size: m.images,
                checkpoint: checkpoint.to_string(),
            });
        }
    }
    Ok(EvalReport { rows })
}

/// Scores the pool and reports R@K; the model is only read.
pub fn evaluate(model: &Model, pool: &EvalPool, ks: &[usize], checkpoint: &str, exec: Exec) -> Result<EvalReport> {
    let m = score_all(model, pool, 64, exec)?;
    eval_report(&m, &pool.caption_image, ks, checkpoint)
}
