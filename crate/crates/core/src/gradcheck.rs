//! Central finite-difference checks of the analytic gradients: every
//! differentiable op on random inputs, and the full model under each
//! pre-training and fine-tuning loss.

use serde::{Deserialize, Serialize};

use crate::corpus::Pair;
use crate::error::Result;
use crate::finetune::{build_groups, finetune_gradients, Direction, FinetuneConfig, FinetuneLoss};
use crate::model::{Model, ModelConfig};
use crate::par::Exec;
use crate::params::{Gradients, ParamStore};
use crate::pretrain::{batch_gradients, build_batch, MaskConfig, PairBatch, PretrainConfig, Tasks};
use crate::rng::Rng;
use crate::synth::{World, WorldSpec};
use crate::tensor::{Graph, Mode, Tensor, Var};
use crate::tokenizer::{Tokenizer, Vocab};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub max_rel_err: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `grads` with central differences of `loss` over up to
/// `per_tensor` coordinates of every tensor.
pub fn check_store(
    name: &str,
    store: &mut ParamStore,
    grads: &Gradients,
    per_tensor: usize,
    rng: &mut Rng,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for id in 0..store.len() {
        let n = store.get(id).numel();
        let coords = if n <= per_tensor {
            (0..n).collect()
        } else {
            rng.sample_distinct(n, per_tensor)
        };
        for k in coords {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + STEP;
            let up = loss(store)?;
            store.get_mut(id).data_mut()[k] = orig - STEP;
            let down = loss(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(grads.get(id)[k], numeric);
            worst = worst.max(e);
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        checked,
        max_rel_err: worst,
    })
}

type OpFn = fn(&mut Graph<'_>, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn sum_of(g: &mut Graph<'_>, v: Result<Var>) -> Result<Var> {
        let v = v?;
        let w = g.mul(v, v)?;
        Ok(g.sum(w))
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, x| {
            let y = g.matmul(x[0], x[1]);
            sum_of(g, y)
        }),
        ("transpose", vec![vec![3, 2]], |g, x| {
            let y = g.transpose(x[0]);
            let c = g.input(vec![2, 3], (0..6).map(|i| i as f64 - 2.0).collect())?;
            let y = g.mul(y?, c);
            sum_of(g, y)
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, x| {
            let a = g.add(x[0], x[1])?;
            let b = g.sub(a, x[1])?;
            let y = g.mul(b, x[1]);
            sum_of(g, y)
        }),
        ("add_row", vec![vec![3, 2], vec![2]], |g, x| {
            let y = g.add_row(x[0], x[1]);
            sum_of(g, y)
        }),
        ("scale_add_scalar", vec![vec![4]], |g, x| {
            let a = g.scale(x[0], -1.7);
            let y = g.add_scalar(a, 0.3);
            sum_of(g, Ok(y))
        }),
        ("gelu", vec![vec![2, 3]], |g, x| {
            let y = g.gelu(x[0]);
            sum_of(g, Ok(y))
        }),
        ("sigmoid", vec![vec![5]], |g, x| {
            let y = g.sigmoid(x[0]);
            sum_of(g, Ok(y))
        }),
        ("relu", vec![vec![6]], |g, x| {
            let y = g.relu(x[0]);
            sum_of(g, Ok(y))
        }),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-12)?;
            let c = g.input(vec![3, 4], (0..12).map(|i| (i as f64 * 0.7).sin()).collect())?;
            let y = g.mul(y, c);
            sum_of(g, y)
        }),
        ("softmax_masked", vec![vec![3, 4]], |g, x| {
            let y = g.softmax(x[0], Some(&[true, false, true, true]))?;
            let c = g.input(vec![3, 4], (0..12).map(|i| (i as f64 * 1.3).cos()).collect())?;
            let y = g.mul(y, c)?;
            Ok(g.sum(y))
        }),
        ("embedding", vec![vec![5, 3]], |g, x| {
            let y = g.embedding(x[0], &[4, 1, 4, 0]);
            sum_of(g, y)
        }),
        ("gather_rows", vec![vec![4, 3]], |g, x| {
            let y = g.gather_rows(x[0], &[3, 3, 0]);
            sum_of(g, y)
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, x| {
            let y = g.concat_rows(&[x[0], x[1], x[0]]);
            sum_of(g, y)
        }),
        ("slice_concat_cols", vec![vec![3, 5]], |g, x| {
            let a = g.slice_cols(x[0], 1, 2)?;
            let b = g.slice_cols(x[0], 4, 1)?;
            let y = g.concat_cols(&[b, a]);
            sum_of(g, y)
        }),
        ("reshape", vec![vec![2, 3]], |g, x| {
            let y = g.reshape(x[0], vec![3, 2])?;
            let c = g.input(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, -1.0, 2.0])?;
            let y = g.mul(y, c);
            sum_of(g, y)
        }),
        ("softmax_ce", vec![vec![3, 4]], |g, x| g.softmax_ce(x[0], &[2, 0, 3])),
        ("binary_ce", vec![vec![4]], |g, x| {
            let p = g.sigmoid(x[0]);
            g.binary_ce(p, &[1.0, 0.0, 0.0, 1.0])
        }),
        ("l2_loss", vec![vec![2, 3], vec![2, 3]], |g, x| g.l2_loss(x[0], x[1])),
        ("dropout", vec![vec![4, 4]], |g, x| {
            let y = g.dropout(x[0], 0.3, Mode::Train, &mut Rng::new(11));
            sum_of(g, y)
        }),
    ]
}

/// Checks every differentiable op.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (ci, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        let mut rng = Rng::derive(seed, ci as u64);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            let n = s.iter().product();
            let t = Tensor::new(s.clone(), (0..n).map(|_| rng.range_f64(-1.5, 1.5)).collect())?;
            store.add(format!("x{i}"), t)?;
        }
        let eval = |st: &ParamStore, want_grad: bool| -> Result<(f64, Option<Gradients>)> {
            let mut g = Graph::new();
            let xs = st.bind(&mut g);
            let y = f(&mut g, &xs)?;
            let v = g.scalar(y);
            if !want_grad {
                return Ok((v, None));
            }
            g.backward(y)?;
            let mut gr = Gradients::zeros_like(st);
            gr.absorb(&g);
            Ok((v, Some(gr)))
        };
        let grads = eval(&store, true)?.1.expect("gradients requested");
        out.push(check_store(name, &mut store, &grads, usize::MAX, &mut rng, |st| {
            Ok(eval(st, false)?.0)
        })?);
    }
    Ok(out)
}

/// Small corpus matching `cfg` (its visual dim, class count and RoI count).
pub fn fixture_pairs(cfg: &ModelConfig, n: usize, seed: u64) -> Result<(Vec<Pair>, Vocab)> {
    let vocab = Vocab::fixture();
    let spec = WorldSpec {
        num_classes: cfg.num_classes,
        rois_per_image: cfg.num_visual_tokens,
        objects_per_image: 2.min(cfg.num_classes).min(cfg.num_visual_tokens),
        visual_dim: cfg.visual_dim,
        global_feature: cfg.use_global_feature,
        images: n,
        ..WorldSpec::default()
    };
    let ds = World::new(spec, seed)?.dataset("fixture", n, 1, 0.0, 0, false)?;
    let pairs = ds.pairs(&Tokenizer::new(vocab.clone()), cfg.max_text_len, cfg.num_visual_tokens)?;
    Ok((pairs, vocab))
}

/// Mask configuration that reliably masks both modalities on short inputs.
pub fn dense_masks() -> MaskConfig {
    MaskConfig {
        text_rate: 0.5,
        visual_rate: 0.5,
        ..MaskConfig::default()
    }
}

pub fn single_task(name: &str) -> Tasks {
    Tasks {
        mlm: name == "mlm",
        moc: name == "moc",
        mrfr: name == "mrfr",
        itm: name == "itm",
    }
}

fn check_pretrain(
    model: &mut Model,
    batch: &PairBatch,
    task: &str,
    per_tensor: usize,
    rng: &mut Rng,
) -> Result<CheckResult> {
    let tasks = single_task(task);
    let grads = batch_gradients(model, batch, tasks, Mode::Train, 5, 0, Exec::Sequential)?.grads;
    let cfg = model.config().clone();
    check_store(
        &format!("model/{task}"),
        model.params_mut(),
        &grads,
        per_tensor,
        rng,
        |st| {
            let m = Model::from_params(cfg.clone(), st.clone())?;
            Ok(batch_gradients(&m, batch, tasks, Mode::Train, 5, 0, Exec::Sequential)?
                .losses
                .total())
        },
    )
}

fn check_finetune(
    model: &mut Model,
    pairs: &[Pair],
    loss: FinetuneLoss,
    per_tensor: usize,
    rng: &mut Rng,
) -> Result<CheckResult> {
    let cfg = FinetuneConfig {
        group_size: 3,
        losses: vec![loss],
        ..FinetuneConfig::default()
    };
    let mut groups = build_groups(pairs, &[0], 3, Direction::ImageToText, 9, 0)?;
    groups.extend(build_groups(pairs, &[1], 3, Direction::TextToImage, 9, 1)?);
    let grads = finetune_gradients(model, pairs, &groups, &cfg, Mode::Train, 3, 0, Exec::Sequential)?.grads;
    let mcfg = model.config().clone();
    check_store(
        &format!("model/{}", format!("{loss:?}").to_lowercase()),
        model.params_mut(),
        &grads,
        per_tensor,
        rng,
        |st| {
            let m = Model::from_params(mcfg.clone(), st.clone())?;
            Ok(
                finetune_gradients(&m, pairs, &groups, &cfg, Mode::Train, 3, 0, Exec::Sequential)?
                    .losses
                    .total(),
            )
        },
    )
}

/// Full model under the four pre-training and three fine-tuning losses.
/// Weights use `init_std` from `cfg`; a larger value than the training
/// default exercises the nonlinearities harder.
pub fn check_model(cfg: &ModelConfig, seed: u64, per_tensor: usize) -> Result<Vec<CheckResult>> {
    let mut model = Model::new(cfg.clone(), &mut Rng::derive(seed, 1))?;
    let (pairs, vocab) = fixture_pairs(cfg, 6, seed)?;
    let pcfg = PretrainConfig {
        mask: dense_masks(),
        ..PretrainConfig::default()
    };
    let refs: Vec<&Pair> = pairs.iter().take(3).collect();
    let batch = build_batch(&refs, &vocab, &pcfg, seed, 0)?;
    let mut rng = Rng::derive(seed, 2);
    let mut out = Vec::new();
    for task in ["mlm", "moc", "mrfr", "itm"] {
        out.push(check_pretrain(&mut model, &batch, task, per_tensor, &mut rng)?);
    }
    for loss in [FinetuneLoss::Binary, FinetuneLoss::Ce, FinetuneLoss::Triplet] {
        out.push(check_finetune(&mut model, &pairs, loss, per_tensor, &mut rng)?);
    }
    Ok(out)
}

pub fn run_suite(cfg: &ModelConfig, seed: u64, per_tensor: usize) -> Result<SuiteReport> {
    let mut results = check_ops(seed)?;
    results.extend(check_model(cfg, seed, per_tensor)?);
    let max_rel_err = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(SuiteReport { results, max_rel_err })
}

/// Gradient-check configuration: the tiny model with larger weights and no
/// global token.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        init_std: 0.3,
        ..ModelConfig::tiny(Vocab::fixture().len())
    }
}
