//! Pre-training: mask planning, the four task losses and the optimizer step.
//!
//! MLM, MOC and MRFR are computed only on related (positive) pairs; ITM sees
//! every pair. Each sample is an independent graph, so samples run through
//! [`Exec`] and their gradients are summed in batch order.

use serde::{Deserialize, Serialize};

use crate::corpus::Pair;
use crate::error::{Error, Result};
use crate::model::{Model, VisualTokenSet};
use crate::optim::Adam;
use crate::par::Exec;
use crate::params::Gradients;
use crate::rng::Rng;
use crate::tensor::{Graph, Mode};
use crate::tokenizer::{TokenSequence, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub text_rate: f64,
    pub mask_token: f64,
    pub random_token: f64,
    pub visual_rate: f64,
    pub visual_zero: f64,
    /// Mask one eligible text token when the draw selects none.
    pub force_text_mask: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            text_rate: 0.15,
            mask_token: 0.8,
            random_token: 0.1,
            visual_rate: 0.15,
            visual_zero: 0.9,
            force_text_mask: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.text_rate,
            self.mask_token,
            self.random_token,
            self.visual_rate,
            self.visual_zero,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.mask_token + self.random_token > 1.0 {
            return Err(Error::Config(format!("mask probabilities out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextAction {
    MaskToken,
    RandomToken,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualAction {
    Zero,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextMask {
    pub index: usize,
    pub action: TextAction,
    /// Token id written at `index`; the original for `Keep`.
    pub replacement: usize,
    pub original: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualMask {
    pub index: usize,
    pub action: VisualAction,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub text: Vec<TextMask>,
    pub visual: Vec<VisualMask>,
}

impl MaskPlan {
    pub fn text_count(&self) -> usize {
        self.text.len()
    }

    pub fn visual_count(&self) -> usize {
        self.visual.len()
    }

    /// Masked copies of the inputs. Zeroing touches only the RoI feature
    /// vector; boxes and labels are kept.
    pub fn apply(&self, seq: &TokenSequence, visual: &VisualTokenSet) -> (TokenSequence, VisualTokenSet) {
        let mut s = seq.clone();
        for m in &self.text {
            s.token_ids[m.index] = m.replacement;
        }
        let mut v = visual.clone();
        let d = v.visual_dim;
        for m in &self.visual {
            if m.action == VisualAction::Zero {
                v.features[m.index * d..(m.index + 1) * d].fill(0.0);
            }
        }
        (s, v)
    }
}

/// Text positions that may be masked: real tokens other than specials.
pub fn eligible_text(seq: &TokenSequence, vocab: &Vocab) -> Vec<usize> {
    seq.token_ids
        .iter()
        .zip(&seq.attention_mask)
        .enumerate()
        .filter(|(_, (&t, &live))| live && !vocab.is_special(t))
        .map(|(i, _)| i)
        .collect()
}

fn random_token(vocab: &Vocab, rng: &mut Rng) -> usize {
    loop {
        let t = rng.below(vocab.len());
        if !vocab.is_special(t) {
            return t;
        }
    }
}

pub fn plan_masks(
    seq: &TokenSequence,
    visual: &VisualTokenSet,
    vocab: &Vocab,
    rng: &mut Rng,
    cfg: &MaskConfig,
) -> MaskPlan {
    let eligible = eligible_text(seq, vocab);
    let mut picked: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|_| rng.uniform() < cfg.text_rate)
        .collect();
    if picked.is_empty() && cfg.force_text_mask && !eligible.is_empty() {
        picked.push(eligible[rng.below(eligible.len())]);
    }
    let text = picked
        .into_iter()
        .map(|index| {
            let original = seq.token_ids[index];
            let u = rng.uniform();
            let (action, replacement) = if u < cfg.mask_token {
                (TextAction::MaskToken, vocab.mask_id())
            } else if u < cfg.mask_token + cfg.random_token {
                (TextAction::RandomToken, random_token(vocab, rng))
            } else {
                (TextAction::Keep, original)
            };
            TextMask {
                index,
                action,
                replacement,
                original,
            }
        })
        .collect();
    let visual = (0..visual.num_tokens())
        .filter(|_| rng.uniform() < cfg.visual_rate)
        .collect::<Vec<_>>()
        .into_iter()
        .map(|index| VisualMask {
            index,
            action: if rng.uniform() < cfg.visual_zero {
                VisualAction::Zero
            } else {
                VisualAction::Keep
            },
        })
        .collect();
    MaskPlan { text, visual }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tasks {
    pub mlm: bool,
    pub moc: bool,
    pub mrfr: bool,
    pub itm: bool,
}

impl Default for Tasks {
    fn default() -> Self {
        Self {
            mlm: true,
            moc: true,
            mrfr: true,
            itm: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask: MaskConfig,
    pub tasks: Tasks,
    /// Mismatched pairs per positive pair, formed inside the batch.
    pub negatives_per_positive: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask: MaskConfig::default(),
            tasks: Tasks::default(),
            negatives_per_positive: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub text: TokenSequence,
    pub visual: VisualTokenSet,
    /// True when caption and image belong together.
    pub related: bool,
    pub plan: MaskPlan,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub samples: Vec<PairSample>,
}

const NEGATIVE_STREAM: u64 = u64::MAX;

fn mask_rng(seed: u64, step: u64, sample: usize) -> Rng {
    Rng::derive2(seed, step, 2 * sample as u64)
}

fn dropout_rng(seed: u64, step: u64, sample: usize) -> Rng {
    Rng::derive2(seed, step, 2 * sample as u64 + 1)
}

/// Positives for every pair plus `negatives_per_positive` mismatched pairs
/// each (caption of `i` with the image of some `j` showing a different image).
pub fn build_batch(pairs: &[&Pair], vocab: &Vocab, cfg: &PretrainConfig, seed: u64, step: u64) -> Result<PairBatch> {
    cfg.mask.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("empty pre-training batch".into()));
    }
    let mut items: Vec<(usize, usize)> = (0..pairs.len()).map(|i| (i, i)).collect();
    if cfg.negatives_per_positive > 0 {
        let mut rng = Rng::derive2(seed, step, NEGATIVE_STREAM);
        for i in 0..pairs.len() {
            let others: Vec<usize> = (0..pairs.len())
                .filter(|&j| pairs[j].image_id != pairs[i].image_id)
                .collect();
            if others.is_empty() {
                return Err(Error::Config(
                    "cannot form negative pairs: every pair in the batch shows the same image".into(),
                ));
            }
            for _ in 0..cfg.negatives_per_positive {
                items.push((i, others[rng.below(others.len())]));
            }
        }
    }
    let samples = items
        .into_iter()
        .enumerate()
        .map(|(k, (ti, vi))| {
            let text = pairs[ti].text.clone();
            let visual = pairs[vi].visual.clone();
            let plan = plan_masks(&text, &visual, vocab, &mut mask_rng(seed, step, k), &cfg.mask);
            PairSample {
                text,
                visual,
                related: ti == vi,
                plan,
            }
        })
        .collect();
    Ok(PairBatch { samples })
}

/// Batch-level denominators shared by every per-sample graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizers {
    pub masked_text: usize,
    pub masked_visual: usize,
    pub positives: usize,
    pub pairs: usize,
}

impl Normalizers {
    pub fn of(batch: &PairBatch) -> Self {
        let pos = batch.samples.iter().filter(|s| s.related);
        Self {
            masked_text: pos.clone().map(|s| s.plan.text_count()).sum(),
            masked_visual: pos.clone().map(|s| s.plan.visual_count()).sum(),
            positives: pos.count(),
            pairs: batch.samples.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub mlm: f64,
    pub moc: f64,
    pub mrfr: f64,
    pub itm: f64,
}

impl TaskLosses {
    pub fn total(&self) -> f64 {
        self.mlm + self.moc + self.mrfr + self.itm
    }

    fn add(&mut self, o: &TaskLosses) {
        self.mlm += o.mlm;
        self.moc += o.moc;
        self.mrfr += o.mrfr;
        self.itm += o.itm;
    }

    fn is_finite(&self) -> bool {
        [self.mlm, self.moc, self.mrfr, self.itm].iter().all(|v| v.is_finite())
    }
}

/// Losses and gradients of a batch.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub losses: TaskLosses,
    pub grads: Gradients,
    /// Masked-task losses had nothing to average over (no positives or no
    /// masked positions) and were reported as zero.
    pub empty_masked: bool,
}

/// One sample's contribution to each enabled loss, already divided by the
/// batch normalizers. Returns the graph output and the per-task values.
fn sample_losses(
    model: &Model,
    s: &PairSample,
    tasks: Tasks,
    norm: Normalizers,
    mode: Mode,
    rng: &mut Rng,
    with_grad: bool,
) -> Result<(TaskLosses, Option<Gradients>)> {
    let mut g = Graph::new();
    let p = if with_grad {
        model.bind(&mut g)
    } else {
        model.bind_frozen(&mut g)
    };
    let (text, visual) = s.plan.apply(&s.text, &s.visual);
    let enc = model.forward(&mut g, &p, &text, &visual, mode, rng)?;
    let mut terms = Vec::new();
    let mut out = TaskLosses::default();
    if s.related {
        if tasks.mlm && !s.plan.text.is_empty() {
            let rows: Vec<usize> = s.plan.text.iter().map(|m| m.index).collect();
            let labels: Vec<usize> = s.plan.text.iter().map(|m| m.original).collect();
            let logits = model.mlm_logits(&mut g, &p, enc.hidden, &rows)?;
            let ce = g.softmax_ce(logits, &labels)?;
            let l = g.scale(ce, rows.len() as f64 / norm.masked_text as f64);
            out.mlm = g.scalar(l);
            terms.push(l);
        }
        if !s.plan.visual.is_empty() && (tasks.moc || tasks.mrfr) {
            let rows: Vec<usize> = s.plan.visual.iter().map(|m| enc.visual_row(m.index)).collect();
            if tasks.moc {
                let labels: Vec<usize> = s.plan.visual.iter().map(|m| s.visual.class_labels[m.index]).collect();
                let logits = model.moc_logits(&mut g, &p, enc.hidden, &rows)?;
                let ce = g.softmax_ce(logits, &labels)?;
                let l = g.scale(ce, rows.len() as f64 / norm.masked_visual as f64);
                out.moc = g.scalar(l);
                terms.push(l);
            }
            if tasks.mrfr {
                let d = s.visual.visual_dim;
                let target: Vec<f64> = s
                    .plan
                    .visual
                    .iter()
                    .flat_map(|m| s.visual.feature(m.index).to_vec())
                    .collect();
                let t = g.input(vec![rows.len(), d], target)?;
                let pred = model.mrfr_pred(&mut g, &p, enc.hidden, &rows)?;
                let sq = g.l2_loss(pred, t)?;
                let l = g.scale(sq, 1.0 / norm.positives as f64);
                out.mrfr = g.scalar(l);
                terms.push(l);
            }
        }
    }
    if tasks.itm {
        let score = model.itm_score(&mut g, &p, enc.hidden)?;
        let bce = g.binary_ce(score, &[if s.related { 1.0 } else { 0.0 }])?;
        let l = g.scale(bce, 1.0 / norm.pairs as f64);
        out.itm = g.scalar(l);
        terms.push(l);
    }
    if !with_grad || terms.is_empty() {
        return Ok((out, None));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.backward(total)?;
    let mut grads = Gradients::zeros_like(model.params());
    grads.absorb(&g);
    Ok((out, Some(grads)))
}

fn run_batch(
    model: &Model,
    batch: &PairBatch,
    tasks: Tasks,
    mode: Mode,
    seed: u64,
    step: u64,
    exec: Exec,
    with_grad: bool,
) -> Result<BatchOutput> {
    let norm = Normalizers::of(batch);
    let results = exec.map_range(batch.samples.len(), |i| {
        let mut rng = dropout_rng(seed, step, i);
        sample_losses(model, &batch.samples[i], tasks, norm, mode, &mut rng, with_grad)
    });
    let mut losses = TaskLosses::default();
    let mut grads = Gradients::zeros_like(model.params());
    for r in results {
        let (l, gr) = r?;
        losses.add(&l);
        if let Some(gr) = gr {
            grads.add(&gr);
        }
    }
    let empty_masked = norm.positives == 0 || (tasks.mlm && norm.masked_text == 0);
    Ok(BatchOutput {
        losses,
        grads,
        empty_masked,
    })
}

/// Losses and parameter gradients of `batch`, without touching the model.
pub fn batch_gradients(
    model: &Model,
    batch: &PairBatch,
    tasks: Tasks,
    mode: Mode,
    seed: u64,
    step: u64,
    exec: Exec,
) -> Result<BatchOutput> {
    run_batch(model, batch, tasks, mode, seed, step, exec, true)
}

/// Losses only, in eval mode.
pub fn batch_losses(model: &Model, batch: &PairBatch, tasks: Tasks, exec: Exec) -> Result<TaskLosses> {
    Ok(run_batch(model, batch, tasks, Mode::Eval, 0, 0, exec, false)?.losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub stage: String,
    pub mlm: f64,
    pub moc: f64,
    pub mrfr: f64,
    pub itm: f64,
    pub total: f64,
    pub lr: f64,
}

/// One Adam step on the summed task losses.
pub fn pretrain_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &PairBatch,
    tasks: Tasks,
    seed: u64,
    step: u64,
    stage: &str,
    exec: Exec,
) -> Result<LossReport> {
    let out = batch_gradients(model, batch, tasks, Mode::Train, seed, step, exec)?;
    if !out.losses.is_finite() || !out.grads.max_abs().is_finite() {
        let dump = serde_json::to_string(batch).unwrap_or_else(|e| format!("<batch not serializable: {e}>"));
        return Err(Error::NonFinite(format!(
            "stage {stage} step {step}: losses {:?}; batch {dump}",
            out.losses
        )));
    }
    model.params_mut().set_grads(&out.grads)?;
    opt.step(model.params_mut())?;
    Ok(LossReport {
        step,
        stage: stage.to_string(),
        mlm: out.losses.mlm,
        moc: out.losses.moc,
        mrfr: out.losses.mrfr,
        itm: out.losses.itm,
        total: out.losses.total(),
        lr: opt.config().lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Tokenizer;

    fn seq(words: usize) -> (TokenSequence, Vocab) {
        let vocab = Vocab::fixture();
        let tok = Tokenizer::new(vocab.clone());
        let text = vec!["cat"; words].join(" ");
        (tok.tokenize(&text, words + 4).unwrap(), vocab)
    }

    fn visual(o: usize) -> VisualTokenSet {
        VisualTokenSet {
            features: vec![1.0; o * 2],
            visual_dim: 2,
            class_labels: vec![0; o],
            boxes: vec![[0.0, 0.0, 1.0, 1.0]; o],
            image_size: (2.0, 2.0),
            global_feature: None,
        }
    }

    #[test]
    fn specials_never_masked() {
        let (s, vocab) = seq(3);
        let cfg = MaskConfig {
            text_rate: 1.0,
            ..MaskConfig::default()
        };
        let plan = plan_masks(&s, &visual(2), &vocab, &mut Rng::new(0), &cfg);
        let idx: Vec<usize> = plan.text.iter().map(|m| m.index).collect();
        assert_eq!(idx, vec![1, 2, 3]);
    }

    #[test]
    fn forced_mask_when_draw_is_empty() {
        let (s, vocab) = seq(2);
        let cfg = MaskConfig {
            text_rate: 0.0,
            visual_rate: 0.0,
            ..MaskConfig::default()
        };
        let plan = plan_masks(&s, &visual(2), &vocab, &mut Rng::new(0), &cfg);
        assert_eq!(plan.text_count(), 1);
        assert_eq!(plan.visual_count(), 0);
    }

    #[test]
    fn zeroing_keeps_geometry() {
        let (s, vocab) = seq(2);
        let v = visual(3);
        let plan = MaskPlan {
            text: vec![],
            visual: vec![VisualMask {
                index: 1,
                action: VisualAction::Zero,
            }],
        };
        let (_, mv) = plan.apply(&s, &v);
        assert_eq!(mv.features, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(mv.boxes, v.boxes);
        let _ = vocab;
    }

    #[test]
    fn bad_mask_config_rejected() {
        let cfg = MaskConfig {
            mask_token: 0.95,
            ..MaskConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
