//! Dense f64 tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every op in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Parameters
//! enter the graph by reference and are never copied.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dim(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BinaryCe {
        p: Var,
        targets: Vec<f64>,
        active: Vec<bool>,
    },
    L2(Var, Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Clamp used by [`Graph::binary_ce`].
pub const BCE_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn rows_of(shape: &[usize]) -> usize {
    shape.iter().product::<usize>().checked_div(cols_of(shape)).unwrap_or(0)
}

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// out[m×k] += dc[m×n] · bᵀ where b is [k×n]
fn gemm_nt(dc: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in drow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k×n] += aᵀ · dc where a is [m×k], dc is [m×n]
fn gemm_tn(a: &[f64], dc: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, d) in orow.iter_mut().zip(drow) {
                *o += aip * d;
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data, .. } = t;
        self.push(Cow::Owned(data), shape, Op::Leaf, false)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data, .. } = t;
        self.push(Cow::Owned(data), shape, Op::Leaf, true)
    }

    /// Borrowed parameter leaf; `id` identifies it in [`Graph::param_grads`].
    pub fn param(&mut self, id: usize, t: &'a Tensor) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Param(id),
            t.requires_grad,
        )
    }

    /// Borrowed parameter leaf that takes no gradient.
    pub fn frozen_param(&mut self, id: usize, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Param(id), false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dim(format!("{what} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(out), vec![n, m], Op::Transpose(a), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = cols_of(self.shape(x));
        if self.value(bias).len() != n {
            return Err(Error::Dim(format!(
                "add_row: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(u, v)| u + v))
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::AddRow(x, bias), ng))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| f(*v)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_op(x, gelu_fwd, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, sigmoid_fwd, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = cols_of(self.shape(x));
        if d < 2 {
            return Err(Error::Dim(format!("layer_norm over a degenerate axis of size {d}")));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Dim(format!(
                "layer_norm affine {:?}/{:?} does not match axis {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = rows_of(self.shape(x));
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise softmax over the last axis. Columns with `key_mask[j] == false`
    /// behave as if their logit were −∞: probability exactly zero, no gradient.
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let n = cols_of(self.shape(x));
        if let Some(m) = key_mask {
            if m.len() != n {
                return Err(Error::Dim(format!(
                    "softmax mask of length {} for rows of length {n}",
                    m.len()
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Input("softmax mask hides every column".into()));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (row, orow) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    orow[j] = e;
                    s += e;
                }
            }
            orow.iter_mut().for_each(|o| *o /= s);
        }
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax(x), ng))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding table")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("embedding id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout. Eval mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.value(x).iter().zip(&mask).map(|(a, b)| a * b).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Dropout { x, mask }, ng))
    }

    /// Mean over rows of −log softmax(logits)[label], log-sum-exp stabilized.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2(logits, "softmax_ce")?;
        if labels.len() != n {
            return Err(Error::Dim(format!("{} labels for {n} rows of logits", labels.len())));
        }
        if n == 0 {
            return Err(Error::Dim("softmax_ce over zero rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside [0, {k})")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            total += lse - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Cow::Owned(vec![total / n as f64]),
            vec![],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    /// `p` is clamped to `[BCE_EPS, 1 − BCE_EPS]`; clamped entries pass no gradient.
    pub fn binary_ce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(p).len();
        if targets.len() != n {
            return Err(Error::Dim(format!("{} targets for {n} probabilities", targets.len())));
        }
        if n == 0 {
            return Err(Error::Dim("binary_ce over zero entries".into()));
        }
        if let Some(bad) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Label(format!("binary target {bad} is not 0 or 1")));
        }
        let mut total = 0.0;
        let mut active = Vec::with_capacity(n);
        for (&pi, &y) in self.value(p).iter().zip(targets) {
            let c = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            active.push(c == pi);
            total -= y * c.ln() + (1.0 - y) * (1.0 - c).ln();
        }
        let ng = self.ng(p);
        Ok(self.push(
            Cow::Owned(vec![total / n as f64]),
            vec![],
            Op::BinaryCe {
                p,
                targets: targets.to_vec(),
                active,
            },
            ng,
        ))
    }

    /// Sum over rows of squared Euclidean distance.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l2_loss")?;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(vec![s]), vec![], Op::L2(a, b), ng))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index(format!("row {r} outside matrix of {m} rows")));
            }
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Cow::Owned(out),
            vec![rows.len(), n],
            Op::GatherRows { x, rows: rows.to_vec() },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dim("concat_rows of nothing".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::Dim(format!("concat_rows: column counts {n} and {c} differ")));
            }
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Cow::Owned(out), vec![rows, n], Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::Index(format!(
                "columns {start}..{} outside matrix of {n} columns",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![m, len], Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dim("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::Dim(format!("concat_cols: row counts {m} and {r} differ")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(Cow::Owned(vec![s]), vec![], Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::Dim(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Reshape(x), ng))
    }

    /// Reverse sweep from the scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.ng(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(param id, gradient)` for every parameter leaf reached by `backward`.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => self.grads.get(i).and_then(|g| g.as_deref()).map(|g| (id, g)),
            _ => None,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Applies `f` to the (lazily zeroed) gradient buffer of `v`.
        fn with<F: FnOnce(&mut [f64])>(grads: &mut [Option<Vec<f64>>], v: Var, needs: bool, len: usize, f: F) {
            if !needs {
                return;
            }
            let slot = &mut grads[v.0];
            let b = slot.get_or_insert_with(|| vec![0.0; len]);
            f(b);
        }
        let ng = |v: Var| nodes[v.0].needs_grad;
        let len = |v: Var| nodes[v.0].value.len();
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                with(grads, *a, ng(*a), len(*a), |da| gemm_nt(g, val(*b), da, m, k, n));
                with(grads, *b, ng(*b), len(*b), |db| gemm_tn(val(*a), g, db, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                with(grads, *a, ng(*a), len(*a), |da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with(grads, *a, ng(*a), len(*a), |da| add_into(da, g));
                with(grads, *b, ng(*b), len(*b), |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                with(grads, *a, ng(*a), len(*a), |da| add_into(da, g));
                with(grads, *b, ng(*b), len(*b), |db| {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi)
                });
            }
            Op::Mul(a, b) => {
                with(grads, *a, ng(*a), len(*a), |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gi * y;
                    }
                });
                with(grads, *b, ng(*b), len(*b), |db| {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += gi * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                with(grads, *x, ng(*x), len(*x), |dx| add_into(dx, g));
                let n = len(*bias);
                with(grads, *bias, ng(*bias), n, |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                with(grads, *x, ng(*x), len(*x), |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi)
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                with(grads, *x, ng(*x), len(*x), |dx| add_into(dx, g));
            }
            Op::Gelu(x) => {
                with(grads, *x, ng(*x), len(*x), |dx| {
                    for ((d, gi), xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                        *d += gi * gelu_grad(*xv);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                with(grads, *x, ng(*x), len(*x), |dx| {
                    for ((d, gi), yv) in dx.iter_mut().zip(g).zip(y.iter()) {
                        *d += gi * yv * (1.0 - yv);
                    }
                });
            }
            Op::Relu(x) => {
                with(grads, *x, ng(*x), len(*x), |dx| {
                    for ((d, gi), xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = len(*gain);
                let gv = val(*gain);
                with(grads, *x, ng(*x), len(*x), |dx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += is * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                with(grads, *gain, ng(*gain), d, |dg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                with(grads, *bias, ng(*bias), d, |db| {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = cols_of(&node.shape);
                let y = &node.value;
                with(grads, *x, ng(*x), len(*x), |dx| {
                    for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                with(grads, *table, ng(*table), len(*table), |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with(grads, *x, ng(*x), len(*x), |dx| {
                    for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                with(grads, *logits, ng(*logits), len(*logits), |dl| {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let t = if j == lab { 1.0 } else { 0.0 };
                            dl[i * k + j] += scale * (probs[i * k + j] - t);
                        }
                    }
                });
            }
            Op::BinaryCe { p, targets, active } => {
                let n = targets.len() as f64;
                let pv = val(*p);
                with(grads, *p, ng(*p), len(*p), |dp| {
                    for j in 0..targets.len() {
                        if active[j] {
                            let (pj, y) = (pv[j], targets[j]);
                            dp[j] += g[0] * (-y / pj + (1.0 - y) / (1.0 - pj)) / n;
                        }
                    }
                });
            }
            Op::L2(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with(grads, *a, ng(*a), len(*a), |da| {
                    for j in 0..da.len() {
                        da[j] += 2.0 * g[0] * (av[j] - bv[j]);
                    }
                });
                with(grads, *b, ng(*b), len(*b), |db| {
                    for j in 0..db.len() {
                        db[j] -= 2.0 * g[0] * (av[j] - bv[j]);
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let n = nodes[x.0].shape[1];
                with(grads, *x, ng(*x), len(*x), |dx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len(p);
                    with(grads, p, ng(p), l, |dp| add_into(dp, &g[off..off + l]));
                    off += l;
                }
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].shape[1];
                let w = node.shape[1];
                with(grads, *x, ng(*x), len(*x), |dx| {
                    for (i, gr) in g.chunks(w).enumerate() {
                        add_into(&mut dx[i * n + start..i * n + start + w], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    with(grads, p, ng(p), len(p), |dp| {
                        for (i, gr) in g.chunks(n).enumerate() {
                            add_into(&mut dp[i * w..(i + 1) * w], &gr[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Sum(x) => {
                with(grads, *x, ng(*x), len(*x), |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
