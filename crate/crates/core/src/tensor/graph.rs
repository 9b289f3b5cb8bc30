use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grouped;

use super::kernels::{self, LayerNormSaved};
use super::{ensure_finite, Gradients, ParamId, ParamStore, Precision, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    BiasAdd { x: Var, bias: Var },
    Sigmoid { x: Var },
    Swish { x: Var },
    Gelu { x: Var },
    Tanh { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: LayerNormSaved },
    Sum { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    MaskRows { x: Var, keep: Vec<bool> },
    Dropout { x: Var, scale: Vec<f64> },
    SelectRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, normalizer: f64, probs: Vec<f64> },
    Attention(AttentionSaved),
    GroupedLinear { x: Var, blocks: Var, groups: usize },
    GroupedConv { x: Var, weight: Var, kernel: usize, group_size: usize, keep: Option<Vec<bool>> },
    Glu { x: Var },
}

pub(crate) struct AttentionSaved {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub key_mask: Option<Vec<bool>>,
    pub probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of executed ops. Nodes are appended in execution order, so every
/// op's inputs precede it and backward simply walks the tape in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    params: BTreeMap<ParamId, Var>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::Oracle64)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            params: BTreeMap::new(),
            backward_done: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        self.precision.round_all(tensor.data_mut());
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf for a stored parameter; repeated calls return the same handle so
    /// that shared parameters accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone().with_requires_grad(true));
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var> {
        self.precision.round_all(&mut data);
        ensure_finite(name, &data)?;
        let value = Tensor::from_parts(shape, data).with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.rg(v))
    }

    pub(crate) fn raw(&self, v: Var) -> &[f64] {
        self.data(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.requires(&[a, b]);
        self.push("matmul", vec![m, n], out, rg, Op::MatMul { a, b, m, k, n })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[2]));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = kernels::transpose(self.data(a), rows, cols);
        let rg = self.requires(&[a]);
        self.push("transpose", vec![cols, rows], out, rg, Op::Transpose { a, rows, cols })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        let rg = self.requires(&[a]);
        self.push("reshape", shape.to_vec(), out, rg, Op::Reshape { a })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires(&[a, b]);
        self.push("add", self.shape(a).to_vec(), out, rg, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires(&[a, b]);
        self.push("mul", self.shape(a).to_vec(), out, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let rg = self.requires(&[a]);
        self.push("scale", self.shape(a).to_vec(), out, rg, Op::Scale { a, factor })
    }

    /// `x[..., n] + bias[n]`, broadcasting over the leading axes only.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape("bias_add", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(r, c)| r + c))
            .collect();
        let rg = self.requires(&[x, bias]);
        self.push("bias_add", self.shape(x).to_vec(), out, rg, Op::BiasAdd { x, bias })
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let rg = self.requires(&[x]);
        self.push(name, self.shape(x).to_vec(), out, rg, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary("swish", x, kernels::swish, Op::Swish { x })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let width = self.value(x).last_dim();
        let out = kernels::softmax_rows(self.data(x), width);
        let rg = self.requires(&[x]);
        self.push("softmax", self.shape(x).to_vec(), out, rg, Op::Softmax { x })
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layernorm eps must be positive, got {eps}")));
        }
        let (out, saved) = kernels::layernorm(self.data(x), self.data(gamma), self.data(beta), eps);
        let rg = self.requires(&[x, gamma, beta]);
        self.push(
            "layernorm",
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm { x, gamma, beta, saved },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut total = 0.0;
        for v in self.data(x) {
            total += v;
        }
        let rg = self.requires(&[x]);
        self.push("sum", vec![1], vec![total], rg, Op::Sum { x })
    }

    /// `x @ w + b` over the last axis of `x`, for any number of leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let inner = *shape.last().expect("rank >= 1");
        let rows = self.value(x).numel() / inner;
        let flat = self.reshape(x, &[rows, inner])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.bias_add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.shape(y)[1];
        self.reshape(y, &out_shape)
    }

    /// Gather rows of `table[n×d]`; output shape is `ids_shape × d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", ts, ids_shape));
        }
        let (n, d) = (ts[0], ts[1]);
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= n) {
            return Err(Error::Index {
                what: "embedding",
                id,
                position,
                size: n,
            });
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.requires(&[table]);
        self.push("embedding", shape, out, rg, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Zero every last-axis row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(x).leading() != keep.len() {
            return Err(Error::shape("mask_rows", self.shape(x), &[keep.len()]));
        }
        let mut out = self.data(x).to_vec();
        for (row, &k) in out.chunks_exact_mut(d).zip(keep) {
            if !k {
                row.fill(0.0);
            }
        }
        let rg = self.requires(&[x]);
        self.push("mask_rows", self.shape(x).to_vec(), out, rg, Op::MaskRows { x, keep: keep.to_vec() })
    }

    /// Inverted dropout. A zero rate returns `x` unchanged without touching `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let out = self.data(x).iter().zip(&scale).map(|(a, s)| a * s).collect();
        let rg = self.requires(&[x]);
        self.push("dropout", self.shape(x).to_vec(), out, rg, Op::Dropout { x, scale })
    }

    /// Select rows (by flattened leading index) of `x[..., d]` into `[rows.len(), d]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let d = self.value(x).last_dim();
        let n = self.value(x).leading();
        if let Some((position, &id)) = rows.iter().enumerate().find(|(_, &r)| r >= n) {
            return Err(Error::Index {
                what: "select_rows",
                id,
                position,
                size: n,
            });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.requires(&[x]);
        self.push("select_rows", vec![rows.len(), d], out, rg, Op::SelectRows { x, rows: rows.to_vec() })
    }

    /// Summed softmax cross-entropy over rows with a target, divided by
    /// `normalizer`. Rows without a target contribute nothing and receive no
    /// gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        normalizer: f64,
    ) -> Result<Var> {
        let v = self.value(logits).last_dim();
        if self.value(logits).leading() != targets.len() {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if normalizer <= 0.0 {
            return Err(Error::Config("cross_entropy normalizer must be positive".into()));
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (row, (t, p)) in targets.iter().zip(probs.chunks_exact_mut(v)).enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::Index {
                    what: "target",
                    id: t,
                    position: row,
                    size: v,
                });
            }
            let src = &x[row * v..(row + 1) * v];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &s in src {
                sum += (s - max).exp();
            }
            let log_z = max + sum.ln();
            total += log_z - src[t];
            for (pj, &s) in p.iter_mut().zip(src) {
                *pj = (s - log_z).exp();
            }
        }
        let rg = self.requires(&[logits]);
        self.push(
            "cross_entropy",
            vec![1],
            vec![total / normalizer],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                normalizer,
                probs,
            },
        )
    }

    /// Multi-head scaled dot-product attention over `[batch, seq, d]` inputs.
    ///
    /// `key_mask[b * seq + j]` marks key `j` of sequence `b` as real. Masked keys
    /// receive exactly zero weight and are skipped entirely.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape("attention", &shape, self.shape(k)));
        }
        let (batch, seq, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        if let Some(m) = key_mask {
            if m.len() != batch * seq {
                return Err(Error::shape("attention mask", &shape, &[m.len()]));
            }
        }
        let (out, probs) = super::attention::forward(
            self.data(q),
            self.data(k),
            self.data(v),
            [batch, seq, d],
            heads,
            key_mask,
        )?;
        let rg = self.requires(&[q, k, v]);
        self.push(
            "attention",
            shape,
            out,
            rg,
            Op::Attention(AttentionSaved {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                key_mask: key_mask.map(<[bool]>::to_vec),
                probs,
            }),
        )
    }

    /// Attention weights `[batch, heads, seq, seq]` retained by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some(Tensor::from_parts(
                vec![s.batch, s.heads, s.seq, s.seq],
                s.probs.clone(),
            )),
            _ => None,
        }
    }

    /// Compute `d loss / d v` for every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss was not recorded on this graph".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.value.requires_grad(), g) {
                node.value.set_grad(g);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Clear all gradients so that backward may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        self.backward_done = false;
    }

    /// Gradients of every registered parameter, zero for unused ones.
    pub fn param_gradients(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                out.get_mut(id).copy_from_slice(g);
            }
        }
        out
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    kernels::matmul_nt_acc(g, self.data(*b), m, k, n, self.slot(grads, *a));
                }
                if self.rg(*b) {
                    kernels::matmul_tn_acc(self.data(*a), g, m, k, n, self.slot(grads, *b));
                }
            }
            Op::Transpose { a, rows, cols } => {
                let t = kernels::transpose(g, *cols, *rows);
                add_into(self.slot(grads, *a), &t);
            }
            Op::Reshape { a } => add_into(self.slot(grads, *a), g),
            Op::Add { a, b } => {
                if self.rg(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.rg(*b) {
                    add_into(self.slot(grads, *b), g);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bv = self.data(*b);
                    for ((d, gv), bv) in self.slot(grads, *a).iter_mut().zip(g).zip(bv) {
                        *d += gv * bv;
                    }
                }
                if self.rg(*b) {
                    let av = self.data(*a);
                    for ((d, gv), av) in self.slot(grads, *b).iter_mut().zip(g).zip(av) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale { a, factor } => {
                for (d, gv) in self.slot(grads, *a).iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }
            Op::BiasAdd { x, bias } => {
                if self.rg(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.rg(*bias) {
                    let db = self.slot(grads, *bias);
                    let n = db.len();
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Sigmoid { x } => {
                for ((d, gv), y) in self.slot(grads, *x).iter_mut().zip(g).zip(out) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::Swish { x } => {
                let xv = self.data(*x);
                for ((d, gv), &xi) in self.slot(grads, *x).iter_mut().zip(g).zip(xv) {
                    *d += gv * kernels::swish_grad(xi);
                }
            }
            Op::Gelu { x } => {
                let xv = self.data(*x);
                for ((d, gv), &xi) in self.slot(grads, *x).iter_mut().zip(g).zip(xv) {
                    *d += gv * kernels::gelu_grad(xi);
                }
            }
            Op::Tanh { x } => {
                for ((d, gv), y) in self.slot(grads, *x).iter_mut().zip(g).zip(out) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Softmax { x } => {
                let w = node.value.last_dim();
                let dx = self.slot(grads, *x);
                for ((y, dy), d) in out.chunks_exact(w).zip(g.chunks_exact(w)).zip(dx.chunks_exact_mut(w)) {
                    kernels::softmax_row_grad(y, dy, d);
                }
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let (dx, dgamma, dbeta) = kernels::layernorm_grad(g, self.data(*gamma), saved);
                if self.rg(*x) {
                    add_into(self.slot(grads, *x), &dx);
                }
                if self.rg(*gamma) {
                    add_into(self.slot(grads, *gamma), &dgamma);
                }
                if self.rg(*beta) {
                    add_into(self.slot(grads, *beta), &dbeta);
                }
            }
            Op::Sum { x } => {
                for d in self.slot(grads, *x).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                let dt = self.slot(grads, *table);
                for (row, &id) in g.chunks_exact(d).zip(ids) {
                    add_into(&mut dt[id * d..(id + 1) * d], row);
                }
            }
            Op::MaskRows { x, keep } => {
                let d = node.value.last_dim();
                let dx = self.slot(grads, *x);
                for ((dst, src), &k) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(keep) {
                    if k {
                        add_into(dst, src);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                for ((d, gv), s) in self.slot(grads, *x).iter_mut().zip(g).zip(scale) {
                    *d += gv * s;
                }
            }
            Op::SelectRows { x, rows } => {
                let d = node.value.last_dim();
                let dx = self.slot(grads, *x);
                for (src, &r) in g.chunks_exact(d).zip(rows) {
                    add_into(&mut dx[r * d..(r + 1) * d], src);
                }
            }
            Op::CrossEntropy { logits, targets, normalizer, probs } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / normalizer;
                let dl = self.slot(grads, *logits);
                for (row, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let p = &probs[row * v..(row + 1) * v];
                    let dst = &mut dl[row * v..(row + 1) * v];
                    for (j, (d, &pj)) in dst.iter_mut().zip(p).enumerate() {
                        let target = if j == t { 1.0 } else { 0.0 };
                        *d += scale * (pj - target);
                    }
                }
            }
            Op::Attention(s) => {
                let d = node.value.last_dim();
                let (dq, dk, dv) = super::attention::backward(
                    g,
                    self.data(s.q),
                    self.data(s.k),
                    self.data(s.v),
                    &s.probs,
                    [s.batch, s.seq, d],
                    s.heads,
                    s.key_mask.as_deref(),
                );
                for (var, grad) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
                    if self.rg(var) {
                        add_into(self.slot(grads, var), &grad);
                    }
                }
            }
            Op::GroupedLinear { x, blocks, groups } => {
                let (dx, dw) = grouped::grouped_linear_backward(
                    g,
                    self.data(*x),
                    self.data(*blocks),
                    self.shape(*blocks),
                    *groups,
                );
                if self.rg(*x) {
                    add_into(self.slot(grads, *x), &dx);
                }
                if self.rg(*blocks) {
                    add_into(self.slot(grads, *blocks), &dw);
                }
            }
            Op::GroupedConv { x, weight, kernel, group_size, keep } => {
                let (dx, dw) = grouped::grouped_conv1d_backward(
                    g,
                    self.data(*x),
                    self.data(*weight),
                    self.shape(*x),
                    *kernel,
                    *group_size,
                    keep.as_deref(),
                );
                if self.rg(*x) {
                    add_into(self.slot(grads, *x), &dx);
                }
                if self.rg(*weight) {
                    add_into(self.slot(grads, *weight), &dw);
                }
            }
            Op::Glu { x } => {
                let dx = grouped::glu_backward(g, self.data(*x), self.value(*x).last_dim());
                add_into(self.slot(grads, *x), &dx);
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
