//! Retrieval fine-tuning: groups of one positive and `P − 1` negative
//! pairings, scored by the matching head, under binary, softmax or triplet
//! losses. No masking and no masked-task heads are involved.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Pair;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::par::Exec;
use crate::params::Gradients;
use crate::rng::Rng;
use crate::tensor::{Graph, Mode, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Image anchor, candidate captions.
    ImageToText,
    /// Caption anchor, candidate images.
    TextToImage,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "image_to_text",
            Direction::TextToImage => "text_to_image",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneLoss {
    Binary,
    Ce,
    Triplet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Candidates per group, positive included.
    pub group_size: usize,
    pub losses: Vec<FinetuneLoss>,
    pub margin: f64,
    /// Directions used in turn, one per step.
    pub directions: Vec<Direction>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            losses: vec![FinetuneLoss::Binary],
            margin: 0.2,
            directions: vec![Direction::ImageToText, Direction::TextToImage],
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(Error::Config("fine-tuning needs at least one loss".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group size {} must be at least 2",
                self.group_size
            )));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "triplet margin {} must be positive",
                self.margin
            )));
        }
        if self.directions.is_empty() {
            return Err(Error::Config("no sampling direction configured".into()));
        }
        Ok(())
    }

    pub fn direction_at(&self, step: u64) -> Direction {
        self.directions[(step % self.directions.len() as u64) as usize]
    }

    fn has(&self, l: FinetuneLoss) -> bool {
        self.losses.contains(&l)
    }
}

/// Indices into a pair list. Candidate 0 is the positive pairing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalGroup {
    pub direction: Direction,
    pub anchor: usize,
    pub negatives: Vec<usize>,
}

impl RetrievalGroup {
    pub fn size(&self) -> usize {
        self.negatives.len() + 1
    }

    /// `(caption pair, image pair)` indices of candidate `k`.
    pub fn candidate(&self, k: usize) -> (usize, usize) {
        let other = if k == 0 { self.anchor } else { self.negatives[k - 1] };
        match self.direction {
            Direction::ImageToText => (other, self.anchor),
            Direction::TextToImage => (self.anchor, other),
        }
    }
}

/// One group per anchor. Negatives are drawn uniformly without replacement
/// from pairs showing a different image; for text-to-image one pair per image
/// is eligible so candidate images are distinct.
pub fn build_groups(
    pairs: &[Pair],
    anchors: &[usize],
    group_size: usize,
    direction: Direction,
    seed: u64,
    step: u64,
) -> Result<Vec<RetrievalGroup>> {
    if group_size < 2 {
        return Err(Error::Config(format!("group size {group_size} must be at least 2")));
    }
    let mut first_of_image = std::collections::HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        first_of_image.entry(p.image_id.as_str()).or_insert(i);
    }
    let images = first_of_image.len();
    let need = group_size - 1;
    let available = match direction {
        Direction::ImageToText => pairs.len(),
        Direction::TextToImage => images,
    };
    if images < 2 || available < group_size {
        return Err(Error::Config(format!(
            "{available} candidates over {images} images cannot fill groups of {group_size}"
        )));
    }
    anchors
        .iter()
        .map(|&a| {
            let mut rng = Rng::derive2(seed, step, a as u64);
            let pool: Vec<usize> = (0..pairs.len())
                .filter(|&j| pairs[j].image_id != pairs[a].image_id)
                .filter(|&j| direction == Direction::ImageToText || first_of_image[pairs[j].image_id.as_str()] == j)
                .collect();
            if pool.len() < need {
                return Err(Error::Config(format!(
                    "anchor {a} has {} eligible negatives, {need} needed",
                    pool.len()
                )));
            }
            let negatives = rng
                .sample_distinct(pool.len(), need)
                .into_iter()
                .map(|k| pool[k])
                .collect();
            Ok(RetrievalGroup {
                direction,
                anchor: a,
                negatives,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLosses {
    pub binary: f64,
    pub ce: f64,
    pub triplet: f64,
}

impl FinetuneLosses {
    pub fn total(&self) -> f64 {
        self.binary + self.ce + self.triplet
    }

    fn add(&mut self, o: &FinetuneLosses) {
        self.binary += o.binary;
        self.ce += o.ce;
        self.triplet += o.triplet;
    }
}

/// Index of the highest-scoring negative (ties to the lower index), counted
/// from 1 as in the candidate list.
pub fn hardest_negative(logits: &[f64]) -> usize {
    let mut best = 1;
    for k in 2..logits.len() {
        if logits[k] > logits[best] {
            best = k;
        }
    }
    best
}

/// Selected losses over a `[P, 1]` column of raw matching logits whose row 0
/// is the positive. Returns the summed loss node and each loss value.
pub fn group_loss(g: &mut Graph<'_>, logits: Var, cfg: &FinetuneConfig) -> Result<(Var, FinetuneLosses)> {
    let p = g.shape(logits)[0];
    let mut terms = Vec::new();
    let mut out = FinetuneLosses::default();
    if cfg.has(FinetuneLoss::Binary) {
        let s = g.sigmoid(logits);
        let targets: Vec<f64> = (0..p).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect();
        let l = g.binary_ce(s, &targets)?;
        out.binary = g.scalar(l);
        terms.push(l);
    }
    if cfg.has(FinetuneLoss::Ce) {
        let row = g.reshape(logits, vec![1, p])?;
        let l = g.softmax_ce(row, &[0])?;
        out.ce = g.scalar(l);
        terms.push(l);
    }
    if cfg.has(FinetuneLoss::Triplet) {
        let h = hardest_negative(g.value(logits));
        let pos = g.gather_rows(logits, &[0])?;
        let neg = g.gather_rows(logits, &[h])?;
        let gap = g.sub(neg, pos)?;
        let shifted = g.add_scalar(gap, cfg.margin);
        let hinge = g.relu(shifted);
        let l = g.sum(hinge);
        out.triplet = g.scalar(l);
        terms.push(l);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, out))
}

/// Raw matching logits of every candidate of `group`, stacked as `[P, 1]`.
pub fn group_logits(
    model: &Model,
    g: &mut Graph<'_>,
    p: &[Var],
    pairs: &[Pair],
    group: &RetrievalGroup,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let mut zs = Vec::with_capacity(group.size());
    for k in 0..group.size() {
        let (t, v) = group.candidate(k);
        let enc = model.forward(g, p, &pairs[t].text, &pairs[v].visual, mode, rng)?;
        zs.push(model.itm_logit(g, p, enc.hidden)?);
    }
    g.concat_rows(&zs)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub losses: FinetuneLosses,
    pub grads: Gradients,
}

/// Mean over groups of the selected losses, with gradients.
pub fn finetune_gradients(
    model: &Model,
    pairs: &[Pair],
    groups: &[RetrievalGroup],
    cfg: &FinetuneConfig,
    mode: Mode,
    seed: u64,
    step: u64,
    exec: Exec,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::Config("no retrieval groups in the batch".into()));
    }
    let n = groups.len() as f64;
    let results = exec.map_range(groups.len(), |i| -> Result<(FinetuneLosses, Gradients)> {
        let mut rng = Rng::derive2(seed, step, (1 << 32) + i as u64);
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let z = group_logits(model, &mut g, &p, pairs, &groups[i], mode, &mut rng)?;
        let (total, mut l) = group_loss(&mut g, z, cfg)?;
        let scaled = g.scale(total, 1.0 / n);
        g.backward(scaled)?;
        let mut grads = Gradients::zeros_like(model.params());
        grads.absorb(&g);
        l.binary /= n;
        l.ce /= n;
        l.triplet /= n;
        Ok((l, grads))
    });
    let mut losses = FinetuneLosses::default();
    let mut grads = Gradients::zeros_like(model.params());
    for r in results {
        let (l, gr) = r?;
        losses.add(&l);
        grads.add(&gr);
    }
    Ok(FinetuneOutput { losses, grads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub step: u64,
    pub stage: String,
    pub direction: Direction,
    pub binary: f64,
    pub ce: f64,
    pub triplet: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn finetune_step(
    model: &mut Model,
    opt: &mut Adam,
    pairs: &[Pair],
    groups: &[RetrievalGroup],
    cfg: &FinetuneConfig,
    seed: u64,
    step: u64,
    stage: &str,
    exec: Exec,
) -> Result<FinetuneReport> {
    let out = finetune_gradients(model, pairs, groups, cfg, Mode::Train, seed, step, exec)?;
    if !out.losses.total().is_finite() || !out.grads.max_abs().is_finite() {
        return Err(Error::NonFinite(format!(
            "stage {stage} step {step}: fine-tune losses {:?}; groups {groups:?}",
            out.losses
        )));
    }
    model.params_mut().set_grads(&out.grads)?;
    opt.step(model.params_mut())?;
    Ok(FinetuneReport {
        step,
        stage: stage.to_string(),
        direction: groups[0].direction,
        binary: out.losses.binary,
        ce: out.losses.ce,
        triplet: out.losses.triplet,
        total: out.losses.total(),
        lr: opt.config().lr,
    })
}
