//! Ablation harness: the same training recipe under several arms and seeds,
//! summarized as median retrieval R@1 per arm.
//!
//! Every arm is an ordinary [`StagePlan`] run through [`run_plan`] with a
//! zero-shot evaluation after each stage; the score of a run is the R@1 of
//! the evaluation after its last stage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::finetune::FinetuneLoss;
use crate::io::write_json;
use crate::model::ModelConfig;
use crate::par::Exec;
use crate::params::ParamStore;
use crate::retrieval::RetrievalDirection;
use crate::synth::{World, WorldSpec};
use crate::trainer::{run_plan, EvalSpec, RunOptions, Stage, StageKind, StagePlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub image_r1: f64,
    pub sentence_r1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub arms: Vec<String>,
    pub results: Vec<ArmResult>,
}

/// Median of `xs`; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

impl AblationTable {
    pub fn new(title: &str, arms: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            arms: arms.iter().map(|a| a.to_string()).collect(),
            results: Vec::new(),
        }
    }

    /// Image-retrieval R@1 of `arm`, in the order the seeds ran.
    pub fn scores(&self, arm: &str) -> Vec<f64> {
        self.results
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.image_r1)
            .collect()
    }

    pub fn median(&self, arm: &str) -> Option<f64> {
        median(&self.scores(arm))
    }

    /// Per-seed differences `a - b` over the seeds both arms ran.
    pub fn paired_differences(&self, a: &str, b: &str) -> Vec<f64> {
        self.results
            .iter()
            .filter(|r| r.arm == a)
            .filter_map(|ra| {
                self.results
                    .iter()
                    .find(|rb| rb.arm == b && rb.seed == ra.seed)
                    .map(|rb| ra.image_r1 - rb.image_r1)
            })
            .collect()
    }

    /// Arms by descending median; ties keep the declaration order.
    pub fn ranking(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .arms
            .iter()
            .filter_map(|a| self.median(a).map(|m| (a.clone(), m)))
            .collect();
        out.sort_by(|x, y| y.1.total_cmp(&x.1));
        out
    }

    /// 1-based competition rank: one plus the number of arms with a strictly
    /// higher median.
    pub fn rank(&self, arm: &str) -> Option<usize> {
        let m = self.median(arm)?;
        Some(1 + self.ranking().iter().filter(|(_, o)| *o > m).count())
    }

    pub fn to_table(&self) -> String {
        let mut seeds: Vec<u64> = self.results.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let width = self.arms.iter().map(String::len).max().unwrap_or(3).max(3) + 2;
        let mut out = format!("{}\n{:<width$}", self.title, "arm");
        for s in &seeds {
            let _ = write!(out, "{:>9}", format!("seed {s}"));
        }
        let _ = writeln!(out, "{:>9}{:>6}", "median", "rank");
        for arm in &self.arms {
            let _ = write!(out, "{arm:<width$}");
            for s in &seeds {
                match self.results.iter().find(|r| &r.arm == arm && r.seed == *s) {
                    Some(r) => {
                        let _ = write!(out, "{:>9.3}", r.image_r1);
                    }
                    None => {
                        let _ = write!(out, "{:>9}", "-");
                    }
                }
            }
            match (self.median(arm), self.rank(arm)) {
                (Some(m), Some(k)) => {
                    let _ = writeln!(out, "{m:>9.3}{k:>6}");
                }
                _ => {
                    let _ = writeln!(out, "{:>9}{:>6}", "-", "-");
                }
            }
        }
        out
    }
}

/// Runs `plan` into `out` and returns the R@1 pair of its last evaluation.
pub fn score_plan(
    plan: &StagePlan,
    base: &Path,
    out: &Path,
    init: Option<ParamStore>,
    exec: Exec,
) -> Result<(f64, f64)> {
    if plan.eval.as_ref().is_none_or(|e| !e.ks.contains(&1)) {
        return Err(Error::Config(
            "an ablation plan needs an evaluation pool with K = 1".into(),
        ));
    }
    let opts = RunOptions {
        init,
        exec,
        ..RunOptions::default()
    };
    let summary = run_plan(plan, base, out, opts)?;
    let report = summary
        .stages
        .last()
        .and_then(|s| s.zero_shot.as_ref())
        .ok_or_else(|| Error::Config("plan produced no evaluation".into()))?;
    let get = |d| {
        report
            .recall(d, 1)
            .ok_or_else(|| Error::Config("missing R@1 row".into()))
    };
    Ok((
        get(RetrievalDirection::ImageRetrieval)?,
        get(RetrievalDirection::SentenceRetrieval)?,
    ))
}

fn stage(template: &Stage, name: &str, datasets: &[&str]) -> Stage {
    Stage {
        name: name.to_string(),
        datasets: datasets.iter().map(|d| d.to_string()).collect(),
        ..template.clone()
    }
}

fn plan(model: &ModelConfig, seed: u64, stages: Vec<Stage>) -> StagePlan {
    StagePlan {
        seed,
        model: model.clone(),
        vocab: None,
        stages,
        eval: Some(EvalSpec {
            pool: "data/pool".into(),
            ks: vec![1],
        }),
    }
}

fn save_all(work: &Path, sets: &[(&str, &Dataset)]) -> Result<()> {
    for (name, ds) in sets {
        ds.save(&work.join("data").join(name))?;
    }
    Ok(())
}

fn run_dir(work: &Path, arm: &str, seed: u64) -> PathBuf {
    work.join("runs").join(format!("{arm}-{seed}"))
}

fn finish(table: AblationTable, work: &Path, file: &str) -> Result<AblationTable> {
    write_json(&work.join(file), &table)?;
    Ok(table)
}

/// Out-of-domain then in-domain pre-training against one stage over both
/// datasets shuffled together, scored zero-shot on an in-domain pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultistageAblation {
    pub world: WorldSpec,
    pub world_seed: u64,
    pub shift: f64,
    pub model: ModelConfig,
    /// Pre-training settings shared by every stage; its datasets are ignored.
    pub stage: Stage,
}

impl MultistageAblation {
    pub const TWO_STAGE: &'static str = "two-stage";
    pub const MERGED: &'static str = "merged";

    pub fn run(&self, work: &Path, seeds: &[u64], exec: Exec) -> Result<AblationTable> {
        let world = World::new(self.world.clone(), self.world_seed)?;
        let (ood, id) = world.domain_pair(self.shift)?;
        save_all(work, &[("ood", &ood), ("id", &id), ("pool", &world.pool()?)])?;
        let mut table = AblationTable::new(
            "multi-stage pre-training, zero-shot R@1",
            &[Self::TWO_STAGE, Self::MERGED],
        );
        for &seed in seeds {
            let arms = [
                (
                    Self::TWO_STAGE,
                    vec![
                        stage(&self.stage, "ood", &["data/ood"]),
                        stage(&self.stage, "id", &["data/id"]),
                    ],
                ),
                (
                    Self::MERGED,
                    vec![stage(&self.stage, "merged", &["data/ood", "data/id"])],
                ),
            ];
            for (arm, stages) in arms {
                let p = plan(&self.model, seed, stages);
                let (image_r1, sentence_r1) = score_plan(&p, work, &run_dir(work, arm, seed), None, exec)?;
                table.results.push(ArmResult {
                    arm: arm.into(),
                    seed,
                    image_r1,
                    sentence_r1,
                });
            }
        }
        finish(table, work, "multistage.json")
    }
}

/// Fine-tuning loss combinations.
pub const LOSS_COMBOS: [(&str, &[FinetuneLoss]); 4] = [
    (
        "binary+ce+triplet",
        &[FinetuneLoss::Binary, FinetuneLoss::Ce, FinetuneLoss::Triplet],
    ),
    ("ce", &[FinetuneLoss::Ce]),
    ("triplet", &[FinetuneLoss::Triplet]),
    ("binary", &[FinetuneLoss::Binary]),
];

/// One pre-training run per seed, then one fine-tuning run per loss
/// combination starting from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLossAblation {
    pub world: WorldSpec,
    pub world_seed: u64,
    pub model: ModelConfig,
    /// Skipped when `None`; fine-tuning then starts from a fresh model.
    pub pretrain: Option<Stage>,
    /// Its losses are replaced by each combination in turn.
    pub finetune: Stage,
}

impl FinetuneLossAblation {
    pub fn run(&self, work: &Path, seeds: &[u64], exec: Exec) -> Result<AblationTable> {
        if self.finetune.kind != StageKind::Finetune {
            return Err(Error::Config(
                "the fine-tuning template must be a finetune stage".into(),
            ));
        }
        let world = World::new(self.world.clone(), self.world_seed)?;
        let train = world.dataset("train", self.world.images, 1, 0.0, 2, false)?;
        save_all(work, &[("train", &train), ("pool", &world.pool()?)])?;
        let names: Vec<&str> = LOSS_COMBOS.iter().map(|(n, _)| *n).collect();
        let mut table = AblationTable::new("fine-tuning losses, R@1", &names);
        for &seed in seeds {
            let init = match &self.pretrain {
                Some(pre) => {
                    let p = plan(&self.model, seed, vec![stage(pre, "pretrain", &["data/train"])]);
                    let dir = run_dir(work, "pretrain", seed);
                    score_plan(&p, work, &dir, None, exec)?;
                    Some(checkpoint::load(&dir.join("final"))?)
                }
                None => None,
            };
            for (name, losses) in LOSS_COMBOS {
                let mut ft = stage(&self.finetune, "finetune", &["data/train"]);
                ft.finetune.losses = losses.to_vec();
                let p = plan(&self.model, seed, vec![ft]);
                let (image_r1, sentence_r1) = score_plan(&p, work, &run_dir(work, name, seed), init.clone(), exec)?;
                table.results.push(ArmResult {
                    arm: name.into(),
                    seed,
                    image_r1,
                    sentence_r1,
                });
            }
        }
        finish(table, work, "finetune_losses.json")
    }
}

/// The same plan with the model reading only the first `o` RoIs of each
/// image, for each `o` in `roi_counts`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiAblation {
    pub world: WorldSpec,
    pub world_seed: u64,
    /// Its `num_visual_tokens` is replaced by each RoI count.
    pub model: ModelConfig,
    pub roi_counts: Vec<usize>,
    /// Stage settings in order; their datasets are ignored.
    pub stages: Vec<Stage>,
}

impl RoiAblation {
    pub fn arm_name(o: usize) -> String {
        format!("o={o}")
    }

    pub fn run(&self, work: &Path, seeds: &[u64], exec: Exec) -> Result<AblationTable> {
        if let Some(&o) = self
            .roi_counts
            .iter()
            .find(|&&o| o == 0 || o > self.world.rois_per_image)
        {
            return Err(Error::Config(format!(
                "RoI count {o} must be in 1..={}",
                self.world.rois_per_image
            )));
        }
        let world = World::new(self.world.clone(), self.world_seed)?;
        let train = world.dataset("train", self.world.images, 1, 0.0, 2, false)?;
        save_all(work, &[("train", &train), ("pool", &world.pool()?)])?;
        let names: Vec<String> = self.roi_counts.iter().map(|&o| Self::arm_name(o)).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut table = AblationTable::new("RoI count, R@1", &refs);
        for &seed in seeds {
            for (&o, name) in self.roi_counts.iter().zip(&names) {
                let model = ModelConfig {
                    num_visual_tokens: o,
                    ..self.model.clone()
                };
                let stages = self
                    .stages
                    .iter()
                    .enumerate()
                    .map(|(i, s)| stage(s, &format!("stage{i}"), &["data/train"]))
                    .collect();
                let p = plan(&model, seed, stages);
                let (image_r1, sentence_r1) = score_plan(&p, work, &run_dir(work, name, seed), None, exec)?;
                table.results.push(ArmResult {
                    arm: name.clone(),
                    seed,
                    image_r1,
                    sentence_r1,
                });
            }
        }
        finish(table, work, "roi_count.json")
    }
}
