//! Reverse-mode gradient graph.
//!
//! A [`Graph`] is an append-only list of nodes. Leaves hold caller-supplied
//! tensors; every other node records the primitive that produced it and the
//! handles of its inputs, so the list is topologically ordered by construction.
//! [`Graph::backward`] walks the list in reverse and accumulates adjoints into
//! every node that requires a gradient.

use super::kernels::{self, AttnShape, MatView};
use super::tensor::Tensor;
use crate::error::{LabError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise binary operations accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    /// `a` is `n×k`, `b` has `k` entries added to every row of `a`.
    AddBias,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    ScaleRows { scale: Var, m: Var },
    ScaleCols { m: Var, scale: Var },
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu(Var),
    CausalAttention { qkv: Var, shape: AttnShape },
    SoftmaxCe { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
    Mse(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::ScaleRows { .. } => "scale_rows",
            Op::ScaleCols { .. } => "scale_cols",
            Op::Binary(..) => "elementwise",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Gather { .. } => "gather",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::CausalAttention { .. } => "causal_attention",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::Mse(..) => "mse",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Binary(_, a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::ScaleRows { scale, m } | Op::ScaleCols { m, scale } => vec![*scale, *m],
            Op::Scale(a, _) | Op::Sum(a) | Op::Gelu(a) => vec![*a],
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::CausalAttention { qkv, .. } => vec![*qkv],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Summary of one recorded node, for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(LabError::Contract(format!(
            "{op} expects a matrix operand, got shape {:?}",
            t.shape()
        )))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf tensor. Leaves with `requires_grad` receive gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn nodes(&self) -> Vec<NodeInfo> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeInfo {
                op: n.op.name(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = Self::evaluate(&op, &|v: Var| &self.nodes[v.0].value)?;
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, rg))
    }

    /// Forward kernel for `op` given a way to look up input values.
    fn evaluate<'a>(op: &Op, val: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let (m, k) = matrix_dims(a, "matmul")?;
                let (k2, n) = matrix_dims(b, "matmul")?;
                if k != k2 {
                    return Err(LabError::dim("matmul", a.shape(), b.shape()));
                }
                let mut out = vec![0.0; m * n];
                kernels::gemm(
                    MatView::new(a.data(), m, k),
                    MatView::new(b.data(), k, n),
                    0.0,
                    &mut out,
                );
                Ok(Tensor::from_parts(vec![m, n], out))
            }
            Op::MatMulBt(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let (m, k) = matrix_dims(a, "matmul_bt")?;
                let (n, k2) = matrix_dims(b, "matmul_bt")?;
                if k != k2 {
                    return Err(LabError::dim("matmul_bt", a.shape(), b.shape()));
                }
                let mut out = vec![0.0; m * n];
                kernels::gemm(
                    MatView::new(a.data(), m, k),
                    MatView::new(b.data(), n, k).t(),
                    0.0,
                    &mut out,
                );
                Ok(Tensor::from_parts(vec![m, n], out))
            }
            Op::ScaleRows { scale, m } => {
                let (s, m) = (val(*scale), val(*m));
                let (rows, cols) = matrix_dims(m, "scale_rows")?;
                if s.shape().len() != 1 || s.numel() != rows {
                    return Err(LabError::dim("scale_rows", s.shape(), m.shape()));
                }
                let mut out = m.data().to_vec();
                for (row, &f) in out.chunks_exact_mut(cols).zip(s.data()) {
                    row.iter_mut().for_each(|x| *x *= f);
                }
                Ok(Tensor::from_parts(vec![rows, cols], out))
            }
            Op::ScaleCols { m, scale } => {
                let (s, m) = (val(*scale), val(*m));
                let (rows, cols) = matrix_dims(m, "scale_cols")?;
                if s.shape().len() != 1 || s.numel() != cols {
                    return Err(LabError::dim("scale_cols", m.shape(), s.shape()));
                }
                let mut out = m.data().to_vec();
                for row in out.chunks_exact_mut(cols) {
                    row.iter_mut().zip(s.data()).for_each(|(x, f)| *x *= f);
                }
                Ok(Tensor::from_parts(vec![rows, cols], out))
            }
            Op::Binary(kind, a, b) => {
                let (a, b) = (val(*a), val(*b));
                if *kind == Elementwise::AddBias {
                    let (_, cols) = matrix_dims(a, "add_bias")?;
                    if b.shape().len() != 1 || b.numel() != cols {
                        return Err(LabError::dim("add_bias", a.shape(), b.shape()));
                    }
                    let mut out = a.data().to_vec();
                    for row in out.chunks_exact_mut(cols) {
                        row.iter_mut().zip(b.data()).for_each(|(x, c)| *x += c);
                    }
                    return Ok(Tensor::from_parts(a.shape().to_vec(), out));
                }
                if a.shape() != b.shape() {
                    return Err(LabError::dim("elementwise", a.shape(), b.shape()));
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    Elementwise::Add => |x, y| x + y,
                    Elementwise::Sub => |x, y| x - y,
                    Elementwise::Mul => |x, y| x * y,
                    Elementwise::AddBias => unreachable!(),
                };
                let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), out))
            }
            Op::Scale(a, c) => {
                let a = val(*a);
                let out = a.data().iter().map(|x| x * c).collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), out))
            }
            Op::Sum(a) => Ok(Tensor::scalar(val(*a).sum())),
            Op::Gather { table, ids } => {
                let t = val(*table);
                let (rows, cols) = matrix_dims(t, "gather")?;
                if ids.is_empty() {
                    return Err(LabError::Contract("gather with no ids".into()));
                }
                let mut out = Vec::with_capacity(ids.len() * cols);
                for &id in ids {
                    if id >= rows {
                        return Err(LabError::Index {
                            what: "gather",
                            index: id,
                            len: rows,
                        });
                    }
                    out.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
                }
                Ok(Tensor::from_parts(vec![ids.len(), cols], out))
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, g, b) = (val(*x), val(*gain), val(*bias));
                let (_, cols) = matrix_dims(x, "layer_norm")?;
                if g.numel() != cols || b.numel() != cols {
                    return Err(LabError::dim("layer_norm", x.shape(), g.shape()));
                }
                let out = kernels::layer_norm(x.data(), g.data(), b.data());
                Ok(Tensor::from_parts(x.shape().to_vec(), out))
            }
            Op::Gelu(a) => {
                let a = val(*a);
                let out = a.data().iter().map(|&x| kernels::gelu(x)).collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), out))
            }
            Op::CausalAttention { qkv, shape } => {
                let q = val(*qkv);
                let (rows, cols) = matrix_dims(q, "causal_attention")?;
                if rows != shape.batch * shape.seq
                    || cols != 3 * shape.width
                    || shape.heads == 0
                    || shape.width % shape.heads != 0
                {
                    return Err(LabError::dim(
                        "causal_attention",
                        q.shape(),
                        &[shape.batch, shape.seq, shape.heads, shape.width],
                    ));
                }
                let out = kernels::causal_attention(q.data(), *shape);
                Ok(Tensor::from_parts(vec![rows, shape.width], out))
            }
            Op::SoftmaxCe {
                logits,
                targets,
                mask,
            } => {
                let l = val(*logits);
                let (rows, cols) = matrix_dims(l, "softmax_ce")?;
                if targets.len() != rows || mask.len() != rows {
                    return Err(LabError::dim("softmax_ce", l.shape(), &[targets.len()]));
                }
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return Err(LabError::DegenerateBatch);
                }
                let mut probs = vec![0.0; cols];
                let mut total = 0.0;
                for (r, row) in l.data().chunks_exact(cols).enumerate() {
                    if !mask[r] {
                        continue;
                    }
                    let t = targets[r];
                    if t >= cols {
                        return Err(LabError::Index {
                            what: "softmax_ce target",
                            index: t,
                            len: cols,
                        });
                    }
                    total += kernels::log_softmax_row(row, &mut probs) - row[t];
                }
                Ok(Tensor::scalar(total / count as f64))
            }
            Op::Mse(a, b) => {
                let (a, b) = (val(*a), val(*b));
                if a.shape() != b.shape() {
                    return Err(LabError::dim("mse", a.shape(), b.shape()));
                }
                let s: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                Ok(Tensor::scalar(s / a.numel() as f64))
            }
        }
    }

    // ---- recording API ------------------------------------------------

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// `a (m×k) · bᵀ` where `b` is `n×k`; applies a stored `out×in` weight to row inputs.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMulBt(a, b))
    }

    /// `diag(s) · m`: row `i` of `m` scaled by `s[i]`.
    pub fn scale_rows(&mut self, s: Var, m: Var) -> Result<Var> {
        self.record(Op::ScaleRows { scale: s, m })
    }

    /// `m · diag(s)`: column `j` of `m` scaled by `s[j]`.
    pub fn scale_cols(&mut self, m: Var, s: Var) -> Result<Var> {
        self.record(Op::ScaleCols { m, scale: s })
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        self.elementwise(Elementwise::AddBias, m, bias)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    /// Rows `ids[i]` of `table`, stacked.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.record(Op::Gather {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.record(Op::LayerNorm { x, gain, bias })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu(a))
    }

    /// Multi-head causal self-attention over a fused `(batch·seq) × 3·width` input
    /// laid out as `[Q | K | V]` column blocks.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let width = self.value(qkv).cols() / 3;
        self.record(Op::CausalAttention {
            qkv,
            shape: AttnShape {
                batch,
                seq,
                heads,
                width,
            },
        })
    }

    /// Mean cross-entropy over unmasked rows of `logits`.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.record(Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
        })
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mse(a, b))
    }

    // ---- replay / backward -------------------------------------------

    /// Recomputes every non-leaf node from the leaves and reports whether each
    /// output reproduces bit-identically.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let vals = &values;
                    Self::evaluate(&node.op, &|v: Var| &vals[v.0])?
                }
            };
            if v.data().iter().zip(node.value.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Ok(false);
            }
            values.push(v);
        }
        Ok(true)
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(LabError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&seed_shape, 1.0));

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &gout);
            self.nodes[i].grad = Some(gout);
            for (input, g) in contributions {
                let slot = &mut self.nodes[input.0].grad;
                match slot {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each input that needs a gradient.
    fn vjp(&self, i: usize, gout: &Tensor) -> Vec<(Var, Tensor)> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let g = gout.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        MatView::new(g, m, n),
                        MatView::new(bv.data(), k, n).t(),
                        0.0,
                        &mut da,
                    );
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        MatView::new(av.data(), m, k).t(),
                        MatView::new(g, m, n),
                        0.0,
                        &mut db,
                    );
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        MatView::new(g, m, n),
                        MatView::new(bv.data(), n, k),
                        0.0,
                        &mut da,
                    );
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if needs(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::gemm(
                        MatView::new(g, m, n).t(),
                        MatView::new(av.data(), m, k),
                        0.0,
                        &mut db,
                    );
                    out.push((*b, Tensor::from_parts(vec![n, k], db)));
                }
            }
            Op::ScaleRows { scale, m } => {
                let (sv, mv) = (val(*scale), val(*m));
                let cols = mv.cols();
                if needs(*m) {
                    let mut dm = g.to_vec();
                    for (row, &f) in dm.chunks_exact_mut(cols).zip(sv.data()) {
                        row.iter_mut().for_each(|x| *x *= f);
                    }
                    out.push((*m, Tensor::from_parts(mv.shape().to_vec(), dm)));
                }
                if needs(*scale) {
                    let ds = g
                        .chunks_exact(cols)
                        .zip(mv.data().chunks_exact(cols))
                        .map(|(gr, mr)| gr.iter().zip(mr).map(|(x, y)| x * y).sum())
                        .collect();
                    out.push((*scale, Tensor::from_parts(sv.shape().to_vec(), ds)));
                }
            }
            Op::ScaleCols { m, scale } => {
                let (sv, mv) = (val(*scale), val(*m));
                let cols = mv.cols();
                if needs(*m) {
                    let mut dm = g.to_vec();
                    for row in dm.chunks_exact_mut(cols) {
                        row.iter_mut().zip(sv.data()).for_each(|(x, f)| *x *= f);
                    }
                    out.push((*m, Tensor::from_parts(mv.shape().to_vec(), dm)));
                }
                if needs(*scale) {
                    let mut ds = vec![0.0; cols];
                    for (gr, mr) in g.chunks_exact(cols).zip(mv.data().chunks_exact(cols)) {
                        for j in 0..cols {
                            ds[j] += gr[j] * mr[j];
                        }
                    }
                    out.push((*scale, Tensor::from_parts(sv.shape().to_vec(), ds)));
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                match kind {
                    Elementwise::Add | Elementwise::Sub => {
                        if needs(*a) {
                            out.push((*a, gout.clone()));
                        }
                        if needs(*b) {
                            let sign = if *kind == Elementwise::Sub { -1.0 } else { 1.0 };
                            let db = g.iter().map(|x| sign * x).collect();
                            out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                        }
                    }
                    Elementwise::Mul => {
                        if needs(*a) {
                            let da = g.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                            out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                        }
                        if needs(*b) {
                            let db = g.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                            out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                        }
                    }
                    Elementwise::AddBias => {
                        if needs(*a) {
                            out.push((*a, gout.clone()));
                        }
                        if needs(*b) {
                            let cols = bv.numel();
                            let mut db = vec![0.0; cols];
                            for row in g.chunks_exact(cols) {
                                db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                            }
                            out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let da = g.iter().map(|x| x * c).collect();
                    out.push((*a, Tensor::from_parts(val(*a).shape().to_vec(), da)));
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    out.push((*a, Tensor::full(val(*a).shape(), g[0])));
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let tv = val(*table);
                    let cols = tv.cols();
                    let mut dt = vec![0.0; tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * cols..(id + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(d, x)| *d += x);
                    }
                    out.push((*table, Tensor::from_parts(tv.shape().to_vec(), dt)));
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (xv, gv, bv) = (val(*x), val(*gain), val(*bias));
                let mut dx = needs(*x).then(|| vec![0.0; xv.numel()]);
                let mut dg = needs(*gain).then(|| vec![0.0; gv.numel()]);
                let mut db = needs(*bias).then(|| vec![0.0; bv.numel()]);
                kernels::layer_norm_backward(
                    xv.data(),
                    gv.data(),
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    out.push((*x, Tensor::from_parts(xv.shape().to_vec(), d)));
                }
                if let Some(d) = dg {
                    out.push((*gain, Tensor::from_parts(gv.shape().to_vec(), d)));
                }
                if let Some(d) = db {
                    out.push((*bias, Tensor::from_parts(bv.shape().to_vec(), d)));
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let av = val(*a);
                    let da = g
                        .iter()
                        .zip(av.data())
                        .map(|(d, &x)| d * kernels::gelu_grad(x))
                        .collect();
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
            }
            Op::CausalAttention { qkv, shape } => {
                if needs(*qkv) {
                    let qv = val(*qkv);
                    let mut dq = vec![0.0; qv.numel()];
                    kernels::causal_attention_backward(qv.data(), *shape, g, &mut dq);
                    out.push((*qkv, Tensor::from_parts(qv.shape().to_vec(), dq)));
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                mask,
            } => {
                if needs(*logits) {
                    let lv = val(*logits);
                    let cols = lv.cols();
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let scale = g[0] / count;
                    let mut dl = vec![0.0; lv.numel()];
                    for (r, (row, drow)) in lv
                        .data()
                        .chunks_exact(cols)
                        .zip(dl.chunks_exact_mut(cols))
                        .enumerate()
                    {
                        if !mask[r] {
                            continue;
                        }
                        kernels::log_softmax_row(row, drow);
                        drow[targets[r]] -= 1.0;
                        drow.iter_mut().for_each(|x| *x *= scale);
                    }
                    out.push((*logits, Tensor::from_parts(lv.shape().to_vec(), dl)));
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let f = 2.0 * g[0] / av.numel() as f64;
                if needs(*a) {
                    let da = av.data().iter().zip(bv.data()).map(|(x, y)| f * (x - y)).collect();
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
                if needs(*b) {
                    let db = av.data().iter().zip(bv.data()).map(|(x, y)| f * (y - x)).collect();
                    out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                }
            }
        }
        out
    }
}
