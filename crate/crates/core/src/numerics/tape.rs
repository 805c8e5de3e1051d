//! Dynamic reverse-mode tape over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each method records one
//! primitive, computes its value eagerly and returns a [`NodeId`]; inputs
//! always precede their consumers, so [`Tape::backward`] is a single reverse
//! sweep. Constants never receive adjoints.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `batch * k_len` flags, `true` for keys that may be attended.
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

#[derive(Debug)]
struct AttentionSaved {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    layout: AttentionLayout,
    /// Post-softmax weights, `[batch, heads, q_len, k_len]` flattened.
    probs: Vec<f64>,
    /// Inverted-dropout factors applied to `probs`, same layout.
    drop: Option<Vec<f64>>,
}

#[derive(Debug)]
struct CrossEntropySaved {
    logits: NodeId,
    targets: Vec<Option<usize>>,
    smoothing: f64,
    probs: Tensor,
    count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sum(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention(Box<AttentionSaved>),
    CrossEntropy(Box<CrossEntropySaved>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros of `like`'s shape if nothing flowed into it.
    pub fn wrt(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.adjoints.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    /// `x [r, c] + bias [1, c]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), out, ng))
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, factor: Tensor) -> Result<NodeId> {
        let value = self.value(a).mul(&factor)?;
        let ng = self.needs(&[a]);
        Ok(self.push(Op::MulConst(a, factor), value, ng))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        let ng = self.needs(&[a]);
        self.push(Op::Scale(a, s), value, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(&[a]);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(Op::Sum(a), value, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.needs(&[a]);
        self.push(Op::SoftmaxRows(a), out, ng)
    }

    /// Row-wise layer norm with `eps` inside the square root, then affine.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let (xhat, inv_std) = normalize_rows(xv, eps);
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((o, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
            ng,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (r, c) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::shape(
                    "gather",
                    format!("row {i} out of range for {:?}", tv.shape()),
                ));
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![ids.len(), c], out)?;
        let ng = self.needs(&[table]);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
            ng,
        ))
    }

    /// Scaled dot-product attention over `heads` column groups.
    ///
    /// `drop`, when given, multiplies the post-softmax weights (one factor
    /// per weight, `[batch, heads, q_len, k_len]`). Returns the context
    /// node and the post-softmax weights.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
        drop: Option<Vec<f64>>,
    ) -> Result<(NodeId, Vec<f64>)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttentionLayout {
            batch: b,
            q_len: tq,
            k_len: tk,
            heads: h,
            ..
        } = layout;
        let d = qv.cols();
        if qv.rows() != b * tq
            || kv.rows() != b * tk
            || !kv.same_shape(vv)
            || kv.cols() != d
            || h == 0
            || d % h != 0
            || layout.key_valid.len() != b * tk
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, batch {b}, q_len {tq}, k_len {tk}, heads {h}, key mask {}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape(),
                    layout.key_valid.len()
                ),
            ));
        }
        let n_w = b * h * tq * tk;
        if let Some(m) = &drop {
            if m.len() != n_w {
                return Err(Error::shape(
                    "attention",
                    format!("dropout mask has {} entries, expected {n_w}", m.len()),
                ));
            }
        }
        let dk = d / h;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; n_w];
        let mut out = vec![0.0; b * tq * d];
        let mut logits = vec![0.0; tk];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..tq {
                    let q_row = &qv.row(bi * tq + i)[hi * dk..(hi + 1) * dk];
                    let mut any = false;
                    for j in 0..tk {
                        let allowed = layout.key_valid[bi * tk + j] && !(layout.causal && j > i);
                        if allowed {
                            any = true;
                            let k_row = &kv.row(bi * tk + j)[hi * dk..(hi + 1) * dk];
                            logits[j] = q_row.iter().zip(k_row).map(|(a, c)| a * c).sum::<f64>() * scale;
                        } else {
                            logits[j] = f64::NEG_INFINITY;
                        }
                    }
                    if !any {
                        return Err(Error::DegenerateSoftmax { row: bi * tq + i });
                    }
                    softmax_in_place(&mut logits);
                    let base = ((bi * h + hi) * tq + i) * tk;
                    probs[base..base + tk].copy_from_slice(&logits);
                    let o_row = &mut out[(bi * tq + i) * d + hi * dk..(bi * tq + i) * d + (hi + 1) * dk];
                    for j in 0..tk {
                        let mut w = logits[j];
                        if let Some(m) = &drop {
                            w *= m[base + j];
                        }
                        if w == 0.0 {
                            continue;
                        }
                        let v_row = &vv.row(bi * tk + j)[hi * dk..(hi + 1) * dk];
                        for (o, x) in o_row.iter_mut().zip(v_row) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b * tq, d], out)?;
        let ng = self.needs(&[q, k, v]);
        let weights = probs.clone();
        let id = self.push(
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                layout,
                probs,
                drop,
            })),
            value,
            ng,
        );
        Ok((id, weights))
    }

    /// Label-smoothed cross-entropy averaged over rows whose target is `Some`.
    ///
    /// The smoothed target puts `1 - smoothing` on the gold class and spreads
    /// `smoothing` uniformly over all classes. Returns the scalar loss node and
    /// the predicted probability rows.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<(NodeId, Tensor)> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("every target position is padding"));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (row_i, row) in probs.data_mut().chunks_mut(c).enumerate() {
            let Some(t) = targets[row_i] else { continue };
            if t >= c {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {t} out of range for {c} classes"),
                ));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0;
            for (j, x) in row.iter().enumerate() {
                let logp = x - lse;
                let q = smoothing / c as f64 + if j == t { 1.0 - smoothing } else { 0.0 };
                row_loss -= q * logp;
            }
            total += row_loss;
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = total / count as f64;
        let ng = self.needs(&[logits]);
        let returned = probs.clone();
        let id = self.push(
            Op::CrossEntropy(Box::new(CrossEntropySaved {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
                count,
            })),
            Tensor::scalar(loss),
            ng,
        );
        Ok((id, returned))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul_t(self.value(*b))?;
                    accumulate(adj, *a, ga)?;
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.value(*a).t_matmul(g)?;
                    accumulate(adj, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.acc_if(adj, *a, g.clone())?;
                self.acc_if(adj, *b, g.clone())?;
            }
            Op::AddBias(x, bias) => {
                self.acc_if(adj, *x, g.clone())?;
                if self.nodes[bias.0].needs_grad {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(adj, *bias, Tensor::new(shape, gb)?)?;
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(adj, *a, g.mul(self.value(*b))?)?;
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(adj, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::MulConst(a, factor) => self.acc_if(adj, *a, g.mul(factor)?)?,
            Op::Scale(a, s) => self.acc_if(adj, *a, g.scale(*s))?,
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                self.acc_if(adj, *a, ga)?;
            }
            Op::Sum(a) => {
                let like = self.value(*a);
                self.acc_if(adj, *a, Tensor::full(like.shape(), g.item()))?;
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(out.numel());
                for (y, gy) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    ga.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                }
                self.acc_if(adj, *a, Tensor::new(out.shape().to_vec(), ga)?)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gv = self.value(*gain);
                if self.nodes[x.0].needs_grad {
                    let mut gx = Vec::with_capacity(out.numel());
                    let mut dxhat = vec![0.0; c];
                    for ((gy, xh), inv) in g.data().chunks(c).zip(xhat.data().chunks(c)).zip(inv_std) {
                        for ((d, gi), gg) in dxhat.iter_mut().zip(gy).zip(gv.data()) {
                            *d = gi * gg;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        gx.extend(dxhat.iter().zip(xh).map(|(d, xv)| inv * (d - mean_d - xv * mean_dx)));
                    }
                    accumulate(adj, *x, Tensor::new(out.shape().to_vec(), gx)?)?;
                }
                if self.nodes[gain.0].needs_grad {
                    let mut gg = vec![0.0; c];
                    for (gy, xh) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                        for ((s, a), b) in gg.iter_mut().zip(gy).zip(xh) {
                            *s += a * b;
                        }
                    }
                    accumulate(adj, *gain, Tensor::new(gv.shape().to_vec(), gg)?)?;
                }
                if self.nodes[bias.0].needs_grad {
                    let mut gb = vec![0.0; c];
                    for gy in g.data().chunks(c) {
                        for (s, a) in gb.iter_mut().zip(gy) {
                            *s += a;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(adj, *bias, Tensor::new(shape, gb)?)?;
                }
            }
            Op::Gather { table, ids } => {
                if self.nodes[table.0].needs_grad {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut gt = Tensor::zeros(tv.shape());
                    for (row, &i) in g.data().chunks(c).zip(ids) {
                        for (s, v) in gt.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(adj, *table, gt)?;
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, g, adj)?,
            Op::CrossEntropy(saved) => {
                if self.nodes[saved.logits.0].needs_grad {
                    let c = saved.probs.cols();
                    let scale = g.item() / saved.count as f64;
                    let mut gl = Tensor::zeros(saved.probs.shape());
                    for (row_i, (gr, pr)) in gl
                        .data_mut()
                        .chunks_mut(c)
                        .zip(saved.probs.data().chunks(c))
                        .enumerate()
                    {
                        let Some(t) = saved.targets[row_i] else { continue };
                        for (j, (gj, pj)) in gr.iter_mut().zip(pr).enumerate() {
                            let q = saved.smoothing / c as f64 + if j == t { 1.0 - saved.smoothing } else { 0.0 };
                            *gj = scale * (pj - q);
                        }
                    }
                    accumulate(adj, saved.logits, gl)?;
                }
            }
        }
        Ok(())
    }

    fn acc_if(&self, adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if self.nodes[id.0].needs_grad {
            accumulate(adj, id, g)?;
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let AttentionLayout {
            batch: b,
            q_len: tq,
            k_len: tk,
            heads: h,
            ..
        } = s.layout;
        let d = qv.cols();
        let dk = d / h;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut gq = vec![0.0; qv.numel()];
        let mut gk = vec![0.0; kv.numel()];
        let mut gv = vec![0.0; vv.numel()];
        let mut dw = vec![0.0; tk];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..tq {
                    let base = ((bi * h + hi) * tq + i) * tk;
                    let p = &s.probs[base..base + tk];
                    let go = &g.row(bi * tq + i)[hi * dk..(hi + 1) * dk];
                    // dL/d(dropped weight) and dL/dV
                    for j in 0..tk {
                        let v_row = &vv.row(bi * tk + j)[hi * dk..(hi + 1) * dk];
                        let mut dwj: f64 = go.iter().zip(v_row).map(|(a, c)| a * c).sum();
                        let factor = s.drop.as_ref().map_or(1.0, |m| m[base + j]);
                        dwj *= factor;
                        dw[j] = dwj;
                        let w = p[j] * factor;
                        if w != 0.0 {
                            let gv_row = &mut gv[(bi * tk + j) * d + hi * dk..(bi * tk + j) * d + (hi + 1) * dk];
                            for (o, x) in gv_row.iter_mut().zip(go) {
                                *o += w * x;
                            }
                        }
                    }
                    let dot: f64 = p.iter().zip(&dw).map(|(a, c)| a * c).sum();
                    let q_row = &qv.row(bi * tq + i)[hi * dk..(hi + 1) * dk];
                    for j in 0..tk {
                        let ds = p[j] * (dw[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let k_row = &kv.row(bi * tk + j)[hi * dk..(hi + 1) * dk];
                        let gq_row = &mut gq[(bi * tq + i) * d + hi * dk..(bi * tq + i) * d + (hi + 1) * dk];
                        for (o, x) in gq_row.iter_mut().zip(k_row) {
                            *o += ds * x;
                        }
                        let gk_row = &mut gk[(bi * tk + j) * d + hi * dk..(bi * tk + j) * d + (hi + 1) * dk];
                        for (o, x) in gk_row.iter_mut().zip(q_row) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.acc_if(adj, s.q, Tensor::new(qv.shape().to_vec(), gq)?)?;
        self.acc_if(adj, s.k, Tensor::new(kv.shape().to_vec(), gk)?)?;
        self.acc_if(adj, s.v, Tensor::new(vv.shape().to_vec(), gv)?)?;
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut adj[id.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Stable softmax; `-inf` entries map to exactly zero.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Per-row `(x - mean) / sqrt(var + eps)` and the inverse std used.
pub fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let c = x.cols();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}
