//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter it
//! through [`Graph::param`]; frozen parameters become constants, so no
//! gradient is ever computed for them. [`Graph::backward`] walks the tape in
//! reverse and returns a [`Gradients`] table that can be folded into the
//! owning [`ParamStore`].

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Segment layout and masking for [`Graph::attention`].
///
/// Queries and keys are stacked row-wise for several independent sequences;
/// segment `s` of the queries only attends to segment `s` of the keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
    /// `(start_row, len)` per sequence, for queries.
    pub q_segments: Vec<(usize, usize)>,
    /// `(start_row, len)` per sequence, for keys and values.
    pub k_segments: Vec<(usize, usize)>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    DivRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Softplus(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, inv_std: Vec<T> },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<T>,
        count: usize,
    },
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    Column(NodeId, usize),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> CoreError {
    CoreError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A constant input. Never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.bound.get(&id) {
            return node;
        }
        let p = store.get(id);
        let node = if p.frozen {
            self.push(p.value.clone(), Op::Leaf, false)
        } else {
            self.push(p.value.clone(), Op::Param(id), true)
        };
        self.bound.insert(id, node);
        node
    }

    /// Copies a value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`, the shape of a linear layer applied to row-stacked tokens.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    fn zip_same(&self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    fn broadcast_row(&self, op: &'static str, a: NodeId, row: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(mismatch(op, ta, tr));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &r) in chunk.iter_mut().zip(tr.data()) {
                *x = f(*x, r);
            }
        }
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Adds a length-`n` row vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.broadcast_row("add_row", a, row, |x, r| x + r)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    /// Divides every row of an `[m×n]` matrix by a length-`n` row vector.
    pub fn div_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.broadcast_row("div_row", a, row, |x, r| x / r)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::DivRow(a, row), ng))
    }

    /// Scales row `i` of an `[m×n]` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = (ta.rows(), ta.cols());
        if tc.len() != m {
            return Err(mismatch("mul_col", ta, tc));
        }
        let mut data = ta.data().to_vec();
        for (chunk, &c) in data.chunks_mut(n).zip(tc.data()) {
            chunk.iter_mut().for_each(|x| *x = *x * c);
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, col]);
        Ok(self.push(v, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        let ng = self.ng(&[a]);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        let ng = self.ng(&[a]);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(v, Op::Square(a), ng)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        let v = softmax_axis(t, axis)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Softmax { x, axis }, ng))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, x: NodeId, eps: T) -> NodeId {
        let t = self.value(x);
        let n = t.cols();
        let nf = T::of(n as f64);
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let v = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        let ng = self.ng(&[x]);
        self.push(v, Op::LayerNorm { x, inv_std }, ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        let ng = self.ng(&[a]);
        self.push(v, Op::Mean(a), ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [tokens×vocab]`. Rows whose target equals `ignore_index` are
    /// skipped; with no rows left the loss is 0 and so is its gradient.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], ignore_index: usize) -> Result<NodeId> {
        let t = self.value(logits);
        let (rows, vocab) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &target) in targets.iter().enumerate() {
            if target == ignore_index {
                continue;
            }
            if target >= vocab {
                return Err(CoreError::IndexOutOfRange { id: target, rows: vocab });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = T::zero();
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj = *pj / z);
            // ln z = ln(1 + Σ_{j≠argmax} e^{x_j - max}); ln_1p keeps tiny losses exact.
            let lse = max + (z - T::one()).ln_1p();
            total += lse - row[target];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Selects rows of `table` by id.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(CoreError::IndexOutOfRange { id, rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::new([ids.len(), d], data)?;
        let ng = self.ng(&[table]);
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new([rows, cols], data)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Column `j` of a matrix, as an `[m×1]` matrix.
    pub fn column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let t = self.value(a);
        if j >= t.cols() {
            return Err(CoreError::IndexOutOfRange { id: j, rows: t.cols() });
        }
        let data = (0..t.rows()).map(|i| t.get2(i, j)).collect();
        let v = Tensor::new([t.rows(), 1], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Column(a, j), ng))
    }

    /// Multi-head scaled dot-product attention over row-stacked sequences.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttentionSpec) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(mismatch("attention", tq, tk));
        }
        if spec.heads == 0 || d % spec.heads != 0 || spec.q_segments.len() != spec.k_segments.len() {
            return Err(CoreError::Config(format!(
                "attention: {} heads over width {d} with {} query / {} key segments",
                spec.heads,
                spec.q_segments.len(),
                spec.k_segments.len()
            )));
        }
        let dh = d / spec.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = vec![T::zero(); tq.rows() * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (&(qs, ql), &(ks, kl)) in spec.q_segments.iter().zip(&spec.k_segments) {
            for h in 0..spec.heads {
                let c0 = h * dh;
                for i in 0..ql {
                    let qi = &tq.row(qs + i)[c0..c0 + dh];
                    let visible = if spec.causal { (i + 1).min(kl) } else { kl };
                    scores.clear();
                    let mut max = T::neg_infinity();
                    for j in 0..visible {
                        let s = dot(qi, &tk.row(ks + j)[c0..c0 + dh]) * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let orow = &mut out[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = *s / z;
                        probs.push(p);
                        let vj = &tv.row(ks + j)[c0..c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([tq.rows(), d], out)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, spec, probs }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(CoreError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) => Some((pid, NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g.data(), tb.data(), &mut da);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(m, k, n, ta.data(), g.data(), &mut db);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(m, n, k, g.data(), tb.data(), &mut da);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(m, n, k, g.data(), ta.data(), &mut db);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(*x) {
                        accumulate(grads, *x, g.shape(), g.data().to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), g.data().to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.shape(), g.data().iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, ta.shape(), d);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, tb.shape(), d);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), g.data().to_vec());
                }
                if self.wants(*row) {
                    let tr = self.value(*row);
                    let mut d = vec![T::zero(); tr.len()];
                    for chunk in g.data().chunks(tr.len()) {
                        for (o, &x) in d.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *row, tr.shape(), d);
                }
            }
            Op::DivRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let n = tr.len();
                if self.wants(*a) {
                    let mut d = g.data().to_vec();
                    for chunk in d.chunks_mut(n) {
                        for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                            *o = *o / r;
                        }
                    }
                    accumulate(grads, *a, ta.shape(), d);
                }
                if self.wants(*row) {
                    // d(x/r)/dr = -x/r² = -out/r
                    let mut d = vec![T::zero(); n];
                    for (gc, oc) in g.data().chunks(n).zip(node.value.data().chunks(n)) {
                        for j in 0..n {
                            d[j] -= gc[j] * oc[j] / tr.data()[j];
                        }
                    }
                    accumulate(grads, *row, tr.shape(), d);
                }
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let n = ta.cols();
                if self.wants(*a) {
                    let mut d = g.data().to_vec();
                    for (chunk, &c) in d.chunks_mut(n).zip(tc.data()) {
                        chunk.iter_mut().for_each(|x| *x = *x * c);
                    }
                    accumulate(grads, *a, ta.shape(), d);
                }
                if self.wants(*col) {
                    let d = g
                        .data()
                        .chunks(n)
                        .zip(ta.data().chunks(n))
                        .map(|(gc, ac)| dot(gc, ac))
                        .collect();
                    accumulate(grads, *col, tc.shape(), d);
                }
            }
            Op::Scale(a, k) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), g.data().iter().map(|&x| x * *k).collect());
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                        .collect();
                    accumulate(grads, *a, ta.shape(), d);
                }
            }
            Op::Softplus(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &v)| x * sigmoid(v)).collect();
                    accumulate(grads, *a, ta.shape(), d);
                }
            }
            Op::Ln(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &v)| x / v).collect();
                    accumulate(grads, *a, ta.shape(), d);
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let two = T::of(2.0);
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &v)| two * v * x).collect();
                    accumulate(grads, *a, ta.shape(), d);
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let (outer, len, inner) = axis_layout(y.shape(), *axis);
                    let mut d = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let s: T = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - s);
                            }
                        }
                    }
                    accumulate(grads, *x, y.shape(), d);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let n = y.cols();
                    let nf = T::of(n as f64);
                    let mut d = vec![T::zero(); y.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gy = &g.data()[r * n..(r + 1) * n];
                        let yy = &y.data()[r * n..(r + 1) * n];
                        let mg = gy.iter().copied().sum::<T>() / nf;
                        let mgy = dot(gy, yy) / nf;
                        for j in 0..n {
                            d[r * n + j] = is * (gy[j] - mg - yy[j] * mgy);
                        }
                    }
                    accumulate(grads, *x, y.shape(), d);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    accumulate(grads, *a, ta.shape(), vec![g.item(); ta.len()]);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let v = g.item() / T::of(ta.len() as f64);
                    accumulate(grads, *a, ta.shape(), vec![v; ta.len()]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let tl = self.value(*logits);
                    let vocab = tl.cols();
                    let mut d = vec![T::zero(); tl.len()];
                    if *count > 0 {
                        let k = g.item() / T::of(*count as f64);
                        for (r, &t) in targets.iter().enumerate() {
                            if t == *ignore_index {
                                continue;
                            }
                            for j in 0..vocab {
                                d[r * vocab + j] = probs[r * vocab + j] * k;
                            }
                            d[r * vocab + t] -= k;
                        }
                    }
                    accumulate(grads, *logits, tl.shape(), d);
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let dcols = tt.cols();
                    let mut d = vec![T::zero(); tt.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g.data()[r * dcols..(r + 1) * dcols];
                        for (o, &x) in d[id * dcols..(id + 1) * dcols].iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *table, tt.shape(), d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let n = tp.len();
                    if self.wants(*p) {
                        accumulate(grads, *p, tp.shape(), g.data()[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Column(a, j) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let n = ta.cols();
                    let mut d = vec![T::zero(); ta.len()];
                    for (i, &x) in g.data().iter().enumerate() {
                        d[i * n + j] = x;
                    }
                    accumulate(grads, *a, ta.shape(), d);
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, spec, probs, g);
                for (id, d) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(d) = d {
                        let shape = self.value(*id).shape().to_vec();
                        accumulate(grads, *id, &shape, d);
                    }
                }
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: &AttentionSpec,
        probs: &[T],
        g: &Tensor<T>,
    ) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / spec.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = vec![T::zero(); tq.len()];
        let mut dk = vec![T::zero(); tk.len()];
        let mut dv = vec![T::zero(); tv.len()];
        let mut dp = Vec::new();
        let mut cursor = 0;
        for (&(qs, ql), &(ks, kl)) in spec.q_segments.iter().zip(&spec.k_segments) {
            for h in 0..spec.heads {
                let c0 = h * dh;
                for i in 0..ql {
                    let visible = if spec.causal { (i + 1).min(kl) } else { kl };
                    let p = &probs[cursor..cursor + visible];
                    cursor += visible;
                    let gi = &g.row(qs + i)[c0..c0 + dh];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &tv.row(ks + j)[c0..c0 + dh];
                        dp.push(dot(gi, vj));
                        let dvj = &mut dv[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                        for (o, &x) in dvj.iter_mut().zip(gi) {
                            *o += pj * x;
                        }
                    }
                    let s: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    let qi = &tq.row(qs + i)[c0..c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let ds = pj * (dp[j] - s) * scale;
                        let kj = &tk.row(ks + j)[c0..c0 + dh];
                        let dqi = &mut dq[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                        for (o, &x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let dkj = &mut dk[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                        for (o, &x) in dkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        (
            self.wants(q).then_some(dq),
            self.wants(k).then_some(dk),
            self.wants(v).then_some(dv),
        )
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, shape: &[usize], d: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape")),
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax_axis<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= t.shape().len() {
        return Err(CoreError::Config(format!(
            "softmax axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    let (outer, len, inner) = axis_layout(t.shape(), axis);
    let mut out = t.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| out[at(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..len {
                let e = (out[at(j)] - max).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / z;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node, if it lies on a differentiable path.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a bound, trainable parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.grads[n.0].as_ref())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node.0] {
                store.accumulate_grad(pid, g);
            }
        }
    }
}
