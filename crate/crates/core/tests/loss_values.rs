use xmodal_core::corpus::Pair;
use xmodal_core::finetune::{group_loss, FinetuneConfig, FinetuneLoss};
use xmodal_core::gradcheck::fixture_pairs;
use xmodal_core::model::{Model, ModelConfig, ITM_HEAD, MLM_HEAD, MOC_HEAD, MRFR_HEAD};
use xmodal_core::par::Exec;
use xmodal_core::pretrain::{batch_losses, build_batch, PretrainConfig, Tasks};
use xmodal_core::rng::Rng;
use xmodal_core::tensor::Graph;
use xmodal_core::tokenizer::Vocab;

fn zero_heads(model: &mut Model) {
    for name in [MLM_HEAD, MOC_HEAD, MRFR_HEAD, ITM_HEAD].concat() {
        model.params_mut().by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
}

fn setup() -> (Model, Vec<Pair>, Vocab) {
    let cfg = ModelConfig::tiny(Vocab::fixture().len());
    let mut model = Model::new(cfg.clone(), &mut Rng::new(3)).unwrap();
    zero_heads(&mut model);
    let (pairs, vocab) = fixture_pairs(&cfg, 6, 4).unwrap();
    (model, pairs, vocab)
}

#[test]
fn uniform_heads_give_log_cardinalities() {
    let (model, pairs, vocab) = setup();
    let refs: Vec<&Pair> = pairs.iter().collect();
    let batch = build_batch(&refs, &vocab, &PretrainConfig::default(), 1, 0).unwrap();
    let l = batch_losses(&model, &batch, Tasks::default(), Exec::Sequential).unwrap();
    let k = model.config().num_classes as f64;
    assert!((l.mlm - (vocab.len() as f64).ln()).abs() < 1e-12, "{}", l.mlm);
    assert!((l.itm - 2f64.ln()).abs() < 1e-12);
    if batch.samples.iter().any(|s| s.related && !s.plan.visual.is_empty()) {
        assert!((l.moc - k.ln()).abs() < 1e-12, "{}", l.moc);
    }
    // A zero regressor costs the squared norm of the masked features.
    let positives = batch.samples.iter().filter(|s| s.related).count() as f64;
    let sq: f64 = batch
        .samples
        .iter()
        .filter(|s| s.related)
        .flat_map(|s| {
            s.plan
                .visual
                .iter()
                .map(move |m| s.visual.feature(m.index).iter().map(|x| x * x).sum::<f64>())
        })
        .sum();
    assert!((l.mrfr - sq / positives).abs() < 1e-12);
}

fn finetune(losses: Vec<FinetuneLoss>, margin: f64) -> FinetuneConfig {
    FinetuneConfig {
        losses,
        margin,
        ..FinetuneConfig::default()
    }
}

fn eval_group(z: &[f64], cfg: &FinetuneConfig) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let v = g.variable(
        xmodal_core::tensor::Tensor::new(vec![z.len(), 1], z.to_vec())
            .unwrap()
            .with_grad(),
    );
    let (total, _) = group_loss(&mut g, v, cfg).unwrap();
    let value = g.scalar(total);
    g.backward(total).unwrap();
    (value, g.grad(v).unwrap().to_vec())
}

#[test]
fn equal_logits_give_ln_p_and_ln_2() {
    for p in [2usize, 4, 8] {
        let z = vec![0.3; p];
        let (ce, _) = eval_group(&z, &finetune(vec![FinetuneLoss::Ce], 0.2));
        assert!((ce - (p as f64).ln()).abs() < 1e-12);
        let (bin, _) = eval_group(&vec![0.0; p], &finetune(vec![FinetuneLoss::Binary], 0.2));
        assert!((bin - 2f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn triplet_hinge_boundaries() {
    let cfg = finetune(vec![FinetuneLoss::Triplet], 0.25);
    // Hardest negative exactly one margin below the positive: no loss.
    let (l, _) = eval_group(&[1.0, 0.5, 0.75], &cfg);
    assert_eq!(l, 0.0);
    let (l, g) = eval_group(&[1.0, 0.5, 1.0], &cfg);
    assert_eq!(l, 0.25);
    assert_eq!(g, vec![-1.0, 0.0, 1.0]);
    // Equal negatives: the lower index is the hardest one.
    let (l, g) = eval_group(&[0.0, 2.0, 2.0], &cfg);
    assert_eq!(l, 2.25);
    assert_eq!(g, vec![-1.0, 1.0, 0.0]);
    let (l, _) = eval_group(&[3.0, -1.0, 0.0, 1.0], &cfg);
    assert_eq!(l, 0.0);
}

#[test]
fn combined_losses_add_up() {
    let z = [0.4, -0.2, 0.9];
    let parts: f64 = [FinetuneLoss::Binary, FinetuneLoss::Ce, FinetuneLoss::Triplet]
        .into_iter()
        .map(|l| eval_group(&z, &finetune(vec![l], 0.2)).0)
        .sum();
    let (all, _) = eval_group(
        &z,
        &finetune(vec![FinetuneLoss::Binary, FinetuneLoss::Ce, FinetuneLoss::Triplet], 0.2),
    );
    assert!((all - parts).abs() < 1e-12);
}
