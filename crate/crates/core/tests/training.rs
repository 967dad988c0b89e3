use std::path::Path;

use xmodal_core::corpus::Pair;
use xmodal_core::finetune::{build_groups, Direction, FinetuneConfig};
use xmodal_core::model::{Model, ModelConfig};
use xmodal_core::optim::{Adam, AdamConfig};
use xmodal_core::par::Exec;
use xmodal_core::pretrain::{build_batch, pretrain_step, PretrainConfig, Tasks};
use xmodal_core::retrieval::EvalPool;
use xmodal_core::rng::Rng;
use xmodal_core::synth::{World, WorldSpec};
use xmodal_core::tokenizer::{Tokenizer, Vocab};
use xmodal_core::trainer::{
    init_model, load_model, read_metrics, run_plan, run_stage, stage_dir, stage_seed, zero_shot_eval_hook, EvalSpec,
    RunOptions, Stage, StageKind, StagePlan,
};

fn small_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 16,
        intermediate: 32,
        heads: 2,
        dropout: 0.1,
        max_seq_len: 24,
        max_text_len: 16,
        num_visual_tokens: 4,
        visual_dim: 8,
        vocab_size: Vocab::fixture().len(),
        num_classes: 5,
        use_global_feature: true,
        layer_norm_eps: 1e-12,
        init_std: 0.1,
    }
}

fn world() -> World {
    World::new(
        WorldSpec {
            num_classes: 5,
            rois_per_image: 4,
            objects_per_image: 2,
            visual_dim: 8,
            images: 24,
            pool_images: 8,
            ..WorldSpec::default()
        },
        3,
    )
    .unwrap()
}

fn pairs(n: usize) -> (Vec<Pair>, Vocab) {
    let vocab = Vocab::fixture();
    let ds = world().dataset("t", n, 1, 0.0, 0, false).unwrap();
    (ds.pairs(&Tokenizer::new(vocab.clone()), 16, 4).unwrap(), vocab)
}

#[test]
fn overfits_one_batch() {
    let cfg = ModelConfig {
        dropout: 0.0,
        hidden: 32,
        intermediate: 64,
        ..small_config()
    };
    let mut model = Model::new(cfg, &mut Rng::new(1)).unwrap();
    let (pairs, vocab) = pairs(6);
    let refs: Vec<&Pair> = pairs.iter().collect();
    let batch = build_batch(&refs, &vocab, &PretrainConfig::default(), 4, 0).unwrap();
    let mut opt = Adam::new(AdamConfig::with_lr(3e-3), model.params()).unwrap();
    let mut first = 0.0;
    let mut last = 0.0;
    for step in 0..200 {
        let r = pretrain_step(
            &mut model,
            &mut opt,
            &batch,
            Tasks::default(),
            4,
            step,
            "o",
            Exec::Parallel,
        )
        .unwrap();
        if step == 0 {
            first = r.total;
        }
        last = r.total;
    }
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn mrfr_alone_decreases() {
    let mut model = Model::new(
        ModelConfig {
            dropout: 0.0,
            ..small_config()
        },
        &mut Rng::new(2),
    )
    .unwrap();
    let (pairs, vocab) = pairs(8);
    let refs: Vec<&Pair> = pairs.iter().collect();
    let pcfg = PretrainConfig {
        tasks: Tasks {
            mlm: false,
            moc: false,
            mrfr: true,
            itm: false,
        },
        ..PretrainConfig::default()
    };
    let batch = build_batch(&refs, &vocab, &pcfg, 1, 0).unwrap();
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3), model.params()).unwrap();
    let losses: Vec<f64> = (0..50)
        .map(|s| {
            pretrain_step(&mut model, &mut opt, &batch, pcfg.tasks, 1, s, "m", Exec::Parallel)
                .unwrap()
                .mrfr
        })
        .collect();
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
    assert!(losses.windows(10).all(|w| w[9] < w[0]), "{losses:?}");
}

fn chi_square(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn in_batch_negatives_are_uniform() {
    let (pairs, vocab) = pairs(10);
    let refs: Vec<&Pair> = pairs.iter().collect();
    let mut counts = vec![0usize; 10];
    for step in 0..4000 {
        let b = build_batch(&refs, &vocab, &PretrainConfig::default(), 9, step).unwrap();
        let neg = &b.samples[10];
        assert!(!neg.related);
        let j = pairs.iter().position(|p| p.visual == neg.visual).unwrap();
        counts[j] += 1;
    }
    assert_eq!(counts[0], 0);
    // 99.9% quantile of chi-square with 8 degrees of freedom.
    let stat = chi_square(&counts[1..]);
    assert!(stat < 26.12, "chi-square {stat}, counts {counts:?}");
}

#[test]
fn group_negatives_are_uniform_and_distinct() {
    let (pairs, _) = pairs(9);
    let mut counts = vec![0usize; 9];
    for step in 0..3000 {
        let g = &build_groups(&pairs, &[4], 4, Direction::TextToImage, 2, step).unwrap()[0];
        let mut seen = g.negatives.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 3);
        for &n in &g.negatives {
            counts[n] += 1;
        }
    }
    assert_eq!(counts[4], 0);
    let others: Vec<usize> = counts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 4)
        .map(|(_, &c)| c)
        .collect();
    let stat = chi_square(&others);
    // 99.9% quantile with 7 degrees of freedom.
    assert!(stat < 24.32, "chi-square {stat}, counts {counts:?}");
}

fn write_corpora(base: &Path) {
    let w = world();
    w.dataset("ood", 24, 1, 1.0, 1, false)
        .unwrap()
        .save(&base.join("ood"))
        .unwrap();
    w.dataset("id", 12, 1, 0.0, 2, false)
        .unwrap()
        .save(&base.join("id"))
        .unwrap();
    w.pool().unwrap().save(&base.join("pool")).unwrap();
}

fn stage(name: &str, data: &str, kind: StageKind) -> Stage {
    Stage {
        name: name.into(),
        datasets: vec![data.into()],
        kind,
        epochs: 1,
        batch_size: Some(6),
        lr: Some(1e-3),
        pretrain: PretrainConfig::default(),
        finetune: FinetuneConfig {
            group_size: 3,
            ..FinetuneConfig::default()
        },
    }
}

fn plan() -> StagePlan {
    StagePlan {
        seed: 42,
        model: small_config(),
        vocab: None,
        stages: vec![
            stage("ood", "ood", StageKind::Pretrain),
            stage("id", "id", StageKind::Pretrain),
            stage("ft", "id", StageKind::Finetune),
        ],
        eval: Some(EvalSpec {
            pool: "pool".into(),
            ks: vec![1, 5],
        }),
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical_for_any_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    write_corpora(tmp.path());
    let p = plan();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_plan(&p, tmp.path(), &a, RunOptions::default()).unwrap();
    run_plan(
        &p,
        tmp.path(),
        &b,
        RunOptions {
            exec: Exec::Sequential,
            ..RunOptions::default()
        },
    )
    .unwrap();
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert!(ta.len() >= 8);
    assert_eq!(ta, tb);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    write_corpora(tmp.path());
    let p = plan();
    let full = tmp.path().join("full");
    let split = tmp.path().join("split");
    let s_full = run_plan(&p, tmp.path(), &full, RunOptions::default()).unwrap();
    run_plan(
        &p,
        tmp.path(),
        &split,
        RunOptions {
            end_stage: Some(1),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let s_split = run_plan(
        &p,
        tmp.path(),
        &split,
        RunOptions {
            start_stage: 1,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(s_full, s_split);
    assert_eq!(tree_bytes(&full.join("final")), tree_bytes(&split.join("final")));
}

#[test]
fn one_stage_plan_equals_the_stage_runner() {
    let tmp = tempfile::tempdir().unwrap();
    write_corpora(tmp.path());
    let mut p = plan();
    p.stages.truncate(1);
    p.eval = None;
    let out = tmp.path().join("one");
    run_plan(&p, tmp.path(), &out, RunOptions::default()).unwrap();
    let from_plan = load_model(&p.model, &out.join("final")).unwrap();

    let ds = xmodal_core::corpus::Dataset::load(&tmp.path().join("ood")).unwrap();
    let tok = Tokenizer::new(Vocab::fixture());
    let pairs = ds.pairs(&tok, 16, 4).unwrap();
    let mut direct = init_model(&p.model, p.seed).unwrap();
    let (reports, _) = run_stage(
        &mut direct,
        &p.stages[0],
        &pairs,
        tok.vocab(),
        stage_seed(p.seed, 0),
        Exec::Parallel,
    )
    .unwrap();
    assert_eq!(direct.params(), from_plan.params());
    assert_eq!(read_metrics(&stage_dir(&out, 0, "ood")).unwrap(), reports);
}

#[test]
fn zero_shot_hook_leaves_parameters_untouched() {
    let model = init_model(&small_config(), 5).unwrap();
    let before = xmodal_core::checkpoint::encode(model.params()).0;
    let pool = EvalPool::from_dataset(&world().pool().unwrap(), &Tokenizer::new(Vocab::fixture()), 16, 4).unwrap();
    let r = zero_shot_eval_hook(&model, &pool, &[1, 5], "x", Exec::Parallel).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert_eq!(xmodal_core::checkpoint::encode(model.params()).0, before);
}

#[test]
fn plan_errors_surface_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    write_corpora(tmp.path());
    let mut p = plan();
    p.stages.push(stage("late", "ood", StageKind::Pretrain));
    assert!(run_plan(&p, tmp.path(), &tmp.path().join("x"), RunOptions::default()).is_err());
    let mut p = plan();
    p.stages[1].datasets = vec!["missing".into()];
    assert!(run_plan(&p, tmp.path(), &tmp.path().join("y"), RunOptions::default()).is_err());
    assert!(!tmp.path().join("y").join("stages").exists());
}
