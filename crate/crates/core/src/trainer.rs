//! Multi-stage training: ordered pre-training stages over different corpora,
//! then mask-free fine-tuning, each stage starting from the parameters the
//! previous one produced.
//!
//! Output layout under the run directory:
//! - `stages/<index>-<name>/`: checkpoint and `model.json` written when the stage ends
//! - `stages/<index>-<name>/metrics.jsonl`: one loss report per step
//! - `summary.json`: per-stage summary, including zero-shot R@K if a pool is set
//! - `final/`: copy of the last stage's checkpoint

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{Dataset, Pair};
use crate::error::{Error, Result};
use crate::finetune::{build_groups, finetune_step, FinetuneConfig};
use crate::io::{atomic_write, read_json, to_jsonl, write_json};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::par::Exec;
use crate::params::ParamStore;
use crate::pretrain::{build_batch, pretrain_step, PretrainConfig};
use crate::retrieval::{evaluate, EvalPool, EvalReport};
use crate::rng::Rng;
use crate::tokenizer::{Tokenizer, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretrain,
    Finetune,
}

impl StageKind {
    pub fn default_batch_size(self) -> usize {
        match self {
            StageKind::Pretrain => 48,
            StageKind::Finetune => 24,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            StageKind::Pretrain => 1e-4,
            StageKind::Finetune => 5e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// Dataset directories, relative to the plan file. Several datasets are
    /// concatenated and shuffled together.
    pub datasets: Vec<String>,
    pub kind: StageKind,
    #[serde(default = "one")]
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

fn one() -> usize {
    1
}

impl Stage {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(self.kind.default_batch_size())
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(self.kind.default_lr())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub pool: String,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
}

pub fn default_ks() -> Vec<usize> {
    vec![1, 5, 10]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub model: ModelConfig,
    /// Vocabulary file relative to the plan; the built-in vocabulary if absent.
    #[serde(default)]
    pub vocab: Option<String>,
    pub stages: Vec<Stage>,
    /// Zero-shot evaluation after every stage.
    #[serde(default)]
    pub eval: Option<EvalSpec>,
}

fn default_seed() -> u64 {
    42
}

impl StagePlan {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Structural checks plus existence of every referenced dataset, done
    /// before any training starts.
    pub fn validate(&self, base: &Path) -> Result<()> {
        self.model.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("a plan needs at least one stage".into()));
        }
        let mut seen_finetune = false;
        for s in &self.stages {
            match s.kind {
                StageKind::Finetune => seen_finetune = true,
                StageKind::Pretrain if seen_finetune => {
                    return Err(Error::Config(format!(
                        "pre-training stage {} comes after a fine-tuning stage",
                        s.name
                    )))
                }
                StageKind::Pretrain => {}
            }
            if s.datasets.is_empty() {
                return Err(Error::Config(format!("stage {} names no dataset", s.name)));
            }
            if s.epochs == 0 || s.batch_size() == 0 {
                return Err(Error::Config(format!(
                    "stage {}: epochs and batch size must be positive",
                    s.name
                )));
            }
            AdamConfig::with_lr(s.lr()).validate()?;
            s.pretrain.mask.validate()?;
            if s.kind == StageKind::Finetune {
                s.finetune.validate()?;
            }
            for d in &s.datasets {
                let dir = base.join(d);
                if !dir.join(crate::corpus::META_FILE).is_file() {
                    return Err(Error::Config(format!(
                        "stage {}: dataset {} not found at {}",
                        s.name,
                        d,
                        dir.display()
                    )));
                }
            }
        }
        if let Some(e) = &self.eval {
            if !base.join(&e.pool).join(crate::corpus::META_FILE).is_file() {
                return Err(Error::Config(format!("evaluation pool {} not found", e.pool)));
            }
        }
        Ok(())
    }

    pub fn tokenizer(&self, base: &Path) -> Result<Tokenizer> {
        let vocab = match &self.vocab {
            Some(p) => Vocab::from_file(&base.join(p))?,
            None => Vocab::fixture(),
        };
        if vocab.len() != self.model.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                self.model.vocab_size
            )));
        }
        Ok(Tokenizer::new(vocab))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub index: usize,
    pub name: String,
    pub kind: StageKind,
    pub steps: u64,
    pub pairs: usize,
    /// Mean total loss over the last epoch.
    pub final_loss: f64,
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub stages: Vec<StageSummary>,
    pub final_checkpoint: String,
}

/// Seed shared by everything random inside stage `index`.
pub fn stage_seed(seed: u64, index: usize) -> u64 {
    Rng::derive(seed, 1000 + index as u64).next_u64()
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(cfg.clone(), &mut Rng::derive(seed, 7))
}

/// Trains `model` for one stage over `pairs`. Returns the per-step reports as
/// JSON values and the mean loss of the last epoch.
pub fn run_stage(
    model: &mut Model,
    stage: &Stage,
    pairs: &[Pair],
    vocab: &Vocab,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<serde_json::Value>, f64)> {
    let bs = stage.batch_size();
    let mut opt = Adam::new(AdamConfig::with_lr(stage.lr()), model.params())?;
    let mut reports = Vec::new();
    let mut step = 0u64;
    let mut last_epoch_loss = f64::NAN;
    for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        Rng::derive2(seed, epoch as u64, u64::MAX - 1).shuffle(&mut order);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 && stage.kind == StageKind::Pretrain && stage.pretrain.negatives_per_positive > 0 {
                continue;
            }
            let value = match stage.kind {
                StageKind::Pretrain => {
                    let refs: Vec<&Pair> = chunk.iter().map(|&i| &pairs[i]).collect();
                    let batch = build_batch(&refs, vocab, &stage.pretrain, seed, step)?;
                    let r = pretrain_step(
                        model,
                        &mut opt,
                        &batch,
                        stage.pretrain.tasks,
                        seed,
                        step,
                        &stage.name,
                        exec,
                    )?;
                    epoch_total += r.total;
                    serde_json::to_value(&r)
                }
                StageKind::Finetune => {
                    let cfg = &stage.finetune;
                    let dir = cfg.direction_at(step);
                    let groups = build_groups(pairs, chunk, cfg.group_size, dir, seed, step)?;
                    let r = finetune_step(model, &mut opt, pairs, &groups, cfg, seed, step, &stage.name, exec)?;
                    epoch_total += r.total;
                    serde_json::to_value(&r)
                }
            }
            .map_err(|e| Error::json("loss report", e))?;
            reports.push(value);
            step += 1;
            epoch_steps += 1;
        }
        last_epoch_loss = epoch_total / epoch_steps.max(1) as f64;
    }
    Ok((reports, last_epoch_loss))
}

pub fn load_datasets(base: &Path, names: &[String]) -> Result<Dataset> {
    let parts = names
        .iter()
        .map(|d| Dataset::load(&base.join(d)))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one part"));
    }
    let refs: Vec<&Dataset> = parts.iter().collect();
    Dataset::merged("merged", &refs)
}

pub fn stage_dir(out: &Path, index: usize, name: &str) -> PathBuf {
    out.join("stages").join(format!("{index}-{name}"))
}

/// Zero-shot R@K of `model` on `pool`; never changes the parameters.
pub fn zero_shot_eval_hook(
    model: &Model,
    pool: &EvalPool,
    ks: &[usize],
    checkpoint: &str,
    exec: Exec,
) -> Result<EvalReport> {
    evaluate(model, pool, ks, checkpoint, exec)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Parameters to start from instead of a fresh initialization.
    pub init: Option<ParamStore>,
    /// Skip stages before this index (resuming from their checkpoint).
    pub start_stage: usize,
    /// Stop after this many stages (exclusive end index).
    pub end_stage: Option<usize>,
    pub exec: Exec,
}

/// Runs the stages of `plan` in order. `base` resolves dataset paths.
pub fn run_plan(plan: &StagePlan, base: &Path, out: &Path, opts: RunOptions) -> Result<RunSummary> {
    plan.validate(base)?;
    let tok = plan.tokenizer(base)?;
    let end = opts.end_stage.unwrap_or(plan.stages.len()).min(plan.stages.len());
    if opts.start_stage > end {
        return Err(Error::Config(format!(
            "start stage {} is past the end {end}",
            opts.start_stage
        )));
    }
    let mut model = init_model(&plan.model, plan.seed)?;
    let mut prior: Vec<StageSummary> = Vec::new();
    if opts.start_stage > 0 {
        let prev = &plan.stages[opts.start_stage - 1];
        let dir = stage_dir(out, opts.start_stage - 1, &prev.name);
        checkpoint::restore_into(model.params_mut(), &checkpoint::load(&dir)?)?;
        if let Ok(s) = read_json::<RunSummary>(&out.join("summary.json")) {
            prior = s.stages.into_iter().take(opts.start_stage).collect();
        }
    } else if let Some(init) = &opts.init {
        checkpoint::restore_into(model.params_mut(), init)?;
    }
    let pool = match &plan.eval {
        Some(e) => {
            let ds = Dataset::load(&base.join(&e.pool))?;
            Some(EvalPool::from_dataset(
                &ds,
                &tok,
                plan.model.max_text_len,
                plan.model.num_visual_tokens,
            )?)
        }
        None => None,
    };
    let mut summaries = prior;
    for (index, stage) in plan.stages.iter().enumerate().take(end).skip(opts.start_stage) {
        let data = load_datasets(base, &stage.datasets)?;
        let pairs = data.pairs(&tok, plan.model.max_text_len, plan.model.num_visual_tokens)?;
        let seed = stage_seed(plan.seed, index);
        let (reports, final_loss) = run_stage(&mut model, stage, &pairs, tok.vocab(), seed, opts.exec)?;
        let dir = stage_dir(out, index, &stage.name);
        let manifest = save_model(&model, &dir)?;
        atomic_write(&dir.join("metrics.jsonl"), to_jsonl(&reports)?.as_bytes())?;
        let zero_shot = match (&pool, &plan.eval) {
            (Some(p), Some(e)) => Some(zero_shot_eval_hook(&model, p, &e.ks, manifest.id(), opts.exec)?),
            _ => None,
        };
        summaries.push(StageSummary {
            index,
            name: stage.name.clone(),
            kind: stage.kind,
            steps: reports.len() as u64,
            pairs: pairs.len(),
            final_loss,
            checkpoint: manifest.id().to_string(),
            zero_shot,
        });
    }
    let final_checkpoint = save_model(&model, &out.join("final"))?.id().to_string();
    let summary = RunSummary {
        seed: plan.seed,
        stages: summaries,
        final_checkpoint,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Model configuration stored beside each checkpoint.
pub const MODEL_FILE: &str = "model.json";

/// Writes the parameters and the model configuration into `dir`.
pub fn save_model(model: &Model, dir: &Path) -> Result<checkpoint::Manifest> {
    let manifest = checkpoint::save(model.params(), dir)?;
    write_json(&dir.join(MODEL_FILE), model.config())?;
    Ok(manifest)
}

/// Loads a checkpoint directory written by [`save_model`].
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let cfg: ModelConfig = read_json(&dir.join(MODEL_FILE))?;
    load_model(&cfg, dir)
}

/// Loads `<dir>` as a model with the given configuration.
pub fn load_model(cfg: &ModelConfig, dir: &Path) -> Result<Model> {
    Model::from_params(cfg.clone(), checkpoint::load(dir)?)
}

pub fn read_metrics(dir: &Path) -> Result<Vec<serde_json::Value>> {
    let path = dir.join("metrics.jsonl");
    if !path.is_file() {
        return Ok(Vec::new());
    }
    crate::io::read_jsonl(&path)
}

/// Removes a run directory's stage outputs (used before re-running a plan
/// into the same directory).
pub fn clear_run(out: &Path) -> Result<()> {
    for sub in ["stages", "final"] {
        let p = out.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}
