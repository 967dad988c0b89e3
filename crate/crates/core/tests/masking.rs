use xmodal_core::corpus::Pair;
use xmodal_core::gradcheck::fixture_pairs;
use xmodal_core::model::{Model, ModelConfig, VisualTokenSet};
use xmodal_core::par::Exec;
use xmodal_core::pretrain::{
    batch_gradients, build_batch, plan_masks, MaskConfig, PairBatch, PairSample, PretrainConfig, Tasks, TextAction,
    VisualAction,
};
use xmodal_core::rng::Rng;
use xmodal_core::tensor::Mode;
use xmodal_core::tokenizer::{Tokenizer, Vocab};

fn long_inputs() -> (xmodal_core::tokenizer::TokenSequence, VisualTokenSet, Vocab) {
    let vocab = Vocab::fixture();
    let tok = Tokenizer::new(vocab.clone());
    let text = ["a", "cat", "and", "dog", "near", "the", "red", "car"]
        .repeat(125)
        .join(" ");
    let seq = tok.tokenize(&text, 1002).unwrap();
    let o = 1000;
    let visual = VisualTokenSet {
        features: vec![1.0; o * 2],
        visual_dim: 2,
        class_labels: vec![0; o],
        boxes: vec![[0.0, 0.0, 1.0, 1.0]; o],
        image_size: (2.0, 2.0),
        global_feature: None,
    };
    (seq, visual, vocab)
}

#[test]
fn rates_and_action_splits_over_many_tokens() {
    let (seq, visual, vocab) = long_inputs();
    let cfg = MaskConfig::default();
    let (mut tn, mut tm, mut mask, mut random, mut keep) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let (mut vn, mut vm, mut zero) = (0usize, 0usize, 0usize);
    for s in 0..200 {
        let plan = plan_masks(&seq, &visual, &vocab, &mut Rng::derive(77, s), &cfg);
        tn += 1000;
        vn += 1000;
        tm += plan.text.len();
        vm += plan.visual.len();
        for m in &plan.text {
            match m.action {
                TextAction::MaskToken => mask += 1,
                TextAction::RandomToken => random += 1,
                TextAction::Keep => keep += 1,
            }
            assert!(!vocab.is_special(m.original));
        }
        zero += plan.visual.iter().filter(|m| m.action == VisualAction::Zero).count();
    }
    let rate = |a: usize, b: usize| a as f64 / b as f64;
    assert!((rate(tm, tn) - 0.15).abs() <= 0.005, "text rate {}", rate(tm, tn));
    assert!((rate(mask, tm) - 0.8).abs() <= 0.01);
    assert!((rate(random, tm) - 0.1).abs() <= 0.01);
    assert!((rate(keep, tm) - 0.1).abs() <= 0.01);
    assert!((rate(vm, vn) - 0.15).abs() <= 0.005, "visual rate {}", rate(vm, vn));
    assert!((rate(zero, vm) - 0.9).abs() <= 0.01);
}

#[test]
fn applying_a_plan_touches_only_masked_positions() {
    let (seq, visual, vocab) = long_inputs();
    let plan = plan_masks(&seq, &visual, &vocab, &mut Rng::new(5), &MaskConfig::default());
    let (t, v) = plan.apply(&seq, &visual);
    let masked: std::collections::HashSet<usize> = plan.text.iter().map(|m| m.index).collect();
    for i in 0..seq.len() {
        if !masked.contains(&i) {
            assert_eq!(t.token_ids[i], seq.token_ids[i]);
        }
    }
    for m in &plan.visual {
        let expect = if m.action == VisualAction::Zero { 0.0 } else { 1.0 };
        assert!(v.feature(m.index).iter().all(|&x| x == expect));
    }
    assert_eq!(v.class_labels, visual.class_labels);
    assert_eq!(v.boxes, visual.boxes);
}

fn all_negative_batch() -> (Model, PairBatch) {
    let cfg = ModelConfig::tiny(Vocab::fixture().len());
    let model = Model::new(cfg.clone(), &mut Rng::new(1)).unwrap();
    let (pairs, vocab) = fixture_pairs(&cfg, 4, 2).unwrap();
    let pcfg = PretrainConfig {
        mask: MaskConfig {
            text_rate: 0.5,
            visual_rate: 0.5,
            ..MaskConfig::default()
        },
        ..PretrainConfig::default()
    };
    let refs: Vec<&Pair> = pairs.iter().collect();
    let full = build_batch(&refs, &vocab, &pcfg, 3, 0).unwrap();
    let samples: Vec<PairSample> = full.samples.into_iter().filter(|s| !s.related).collect();
    assert!(samples.iter().all(|s| !s.plan.text.is_empty()));
    (model, PairBatch { samples })
}

#[test]
fn all_negative_batch_has_no_masked_task_gradient() {
    let (model, batch) = all_negative_batch();
    let masked = Tasks {
        itm: false,
        ..Tasks::default()
    };
    let out = batch_gradients(&model, &batch, masked, Mode::Train, 1, 0, Exec::Sequential).unwrap();
    assert!(out.grads.is_exactly_zero());
    assert_eq!((out.losses.mlm, out.losses.moc, out.losses.mrfr), (0.0, 0.0, 0.0));
    assert!(out.empty_masked);
    let itm = Tasks {
        mlm: false,
        moc: false,
        mrfr: false,
        itm: true,
    };
    let out = batch_gradients(&model, &batch, itm, Mode::Train, 1, 0, Exec::Sequential).unwrap();
    assert!(out.grads.max_abs() > 0.0);
    assert!(out.losses.itm > 0.0);
}
