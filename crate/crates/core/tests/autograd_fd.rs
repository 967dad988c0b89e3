//! Gradients of composite expressions against a five-point finite-difference
//! stencil written here, independently of the library's checker.

use xmodal_core::corpus::Pair;
use xmodal_core::gradcheck::fixture_pairs;
use xmodal_core::model::{Model, ModelConfig};
use xmodal_core::par::Exec;
use xmodal_core::params::{Gradients, ParamStore};
use xmodal_core::pretrain::{batch_gradients, build_batch, PretrainConfig, Tasks};
use xmodal_core::rng::Rng;
use xmodal_core::tensor::{Graph, Mode, Tensor, Var};
use xmodal_core::tokenizer::Vocab;

fn stencil(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-3)
}

fn random(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap()
}

type Expr = fn(&mut Graph<'_>, &[Var]) -> Var;

fn check_expr(shapes: &[Vec<usize>], f: Expr) {
    let mut rng = Rng::new(21);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.add(format!("x{i}"), random(&mut rng, s.clone())).unwrap();
    }
    let value = |st: &ParamStore| {
        let mut g = Graph::new();
        let xs = st.bind(&mut g);
        let y = f(&mut g, &xs);
        g.scalar(y)
    };
    let mut g = Graph::new();
    let xs = store.bind(&mut g);
    let y = f(&mut g, &xs);
    g.backward(y).unwrap();
    let mut grads = Gradients::zeros_like(&store);
    grads.absorb(&g);
    drop(g);
    for id in 0..store.len() {
        for k in 0..store.get(id).numel() {
            let x0 = store.get(id).data()[k];
            let mut probe = store.clone();
            let numeric = stencil(
                &mut |x| {
                    probe.get_mut(id).data_mut()[k] = x;
                    value(&probe)
                },
                x0,
                1e-4,
            );
            let analytic = grads.get(id)[k];
            assert!(
                close(analytic, numeric),
                "tensor {id} coord {k}: {analytic} vs {numeric}"
            );
        }
    }
}

#[test]
fn attention_block() {
    check_expr(&[vec![3, 4], vec![4, 4], vec![4], vec![4], vec![4]], |g, x| {
        let q = g.matmul(x[0], x[1]).unwrap();
        let kt = g.transpose(x[0]).unwrap();
        let s = g.matmul(q, kt).unwrap();
        let s = g.scale(s, 0.5);
        let a = g.softmax(s, Some(&[true, true, false])).unwrap();
        let h = g.matmul(a, x[0]).unwrap();
        let h = g.add_row(h, x[2]).unwrap();
        let n = g.layer_norm(h, x[3], x[4], 1e-12).unwrap();
        let act = g.gelu(n);
        let sq = g.mul(act, act).unwrap();
        g.sum(sq)
    });
}

#[test]
fn heads_and_losses() {
    check_expr(&[vec![4, 3], vec![3, 5], vec![4, 3]], |g, x| {
        let logits = g.matmul(x[0], x[1]).unwrap();
        let ce = g.softmax_ce(logits, &[0, 4, 2, 2]).unwrap();
        let rows = g.gather_rows(x[0], &[3, 1]).unwrap();
        let col = g.slice_cols(rows, 1, 1).unwrap();
        let p = g.sigmoid(col);
        let bce = g.binary_ce(p, &[1.0, 0.0]).unwrap();
        let l2 = g.l2_loss(x[0], x[2]).unwrap();
        let t = g.add(ce, bce).unwrap();
        g.add(t, l2).unwrap()
    });
}

#[test]
fn embeddings_and_reshapes() {
    check_expr(&[vec![6, 2], vec![2, 2]], |g, x| {
        let e = g.embedding(x[0], &[5, 0, 5]).unwrap();
        let both = g.concat_rows(&[e, x[1]]).unwrap();
        let wide = g.concat_cols(&[both, both]).unwrap();
        let r = g.reshape(wide, vec![4, 5]).unwrap();
        let r = g.add_scalar(r, -0.3);
        let r = g.relu(r);
        let sq = g.mul(r, r).unwrap();
        g.sum(sq)
    });
}

#[test]
fn full_model_pretraining_loss() {
    let cfg = ModelConfig {
        init_std: 0.2,
        dropout: 0.0,
        ..ModelConfig::tiny(Vocab::fixture().len())
    };
    let model = Model::new(cfg.clone(), &mut Rng::new(8)).unwrap();
    let (pairs, vocab) = fixture_pairs(&cfg, 3, 8).unwrap();
    let refs: Vec<&Pair> = pairs.iter().collect();
    let pcfg = PretrainConfig {
        mask: xmodal_core::gradcheck::dense_masks(),
        ..PretrainConfig::default()
    };
    let batch = build_batch(&refs, &vocab, &pcfg, 2, 0).unwrap();
    let loss = |m: &Model| {
        batch_gradients(m, &batch, Tasks::default(), Mode::Train, 0, 0, Exec::Sequential)
            .unwrap()
            .losses
            .total()
    };
    let grads = batch_gradients(&model, &batch, Tasks::default(), Mode::Train, 0, 0, Exec::Sequential)
        .unwrap()
        .grads;
    let mut rng = Rng::new(4);
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for (id, name) in names.iter().enumerate() {
        let n = model.params().get(id).numel();
        for _ in 0..2 {
            let mut k = rng.below(n);
            if name.ends_with("attn.qkv.bias") && (cfg.hidden..2 * cfg.hidden).contains(&k) {
                // Key biases cancel in the softmax; their gradient is zero.
                k -= cfg.hidden;
            }
            let mut probe = model.clone();
            let x0 = probe.params().get(id).data()[k];
            let numeric = stencil(
                &mut |x| {
                    probe.params_mut().get_mut(id).data_mut()[k] = x;
                    loss(&probe)
                },
                x0,
                1e-4,
            );
            let analytic = grads.get(id)[k];
            assert!(close(analytic, numeric), "{name}[{k}]: {analytic} vs {numeric}");
        }
    }
}
