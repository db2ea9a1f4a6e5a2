//! Computation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. Nodes are only ever appended after their
//! inputs, so the tape order is already a topological order and `backward`
//! walks it in reverse, touching each node once.

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability clamp used by [`Tape::binary_cross_entropy`].
pub const BCE_EPS: f32 = 1e-7;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulT {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        a: Var,
        bias: Var,
    },
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Bce {
        p: Var,
        targets: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct AttnGeom {
    batch: usize,
    seq: usize,
    heads: usize,
    hidden: usize,
    keep: Vec<bool>,
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients of the leaves produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
    visited: Vec<usize>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a tensor as a leaf. It participates in differentiation iff
    /// the tensor is marked trainable.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().iter().map(|&x| T::of_f32(x)).collect(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.iter().map(|x| x.as_f32()).collect())
            .expect("node shape is consistent")
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the layout used for `[out, in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(mismatch("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMulT { a, b, m, k, n }, ng))
    }

    /// Affine map `x · wᵀ + b` with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op_name, self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector to every row of `a` (broadcast over the last dimension).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.shape(bias) != [n] {
            return Err(mismatch("add_bias", self.shape(a), self.shape(bias)));
        }
        let bv = self.value(bias);
        let out: Vec<T> = self
            .value(a)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(bias);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddBias { a, bias }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(a));
        self.push(shape, out, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(a));
        self.push(shape, out, op, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = last_dim(&shape);
        if n == 0 {
            return Err(TensorError::Invalid(
                "softmax over an empty dimension".into(),
            ));
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_into(row, o);
        }
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::SoftmaxRows(a), ng))
    }

    /// Row-wise layer normalization with affine gain and bias over the last
    /// dimension. Statistics are accumulated in f64.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        if self.shape(gain) != [n] {
            return Err(mismatch("layer_norm", &shape, self.shape(gain)));
        }
        if self.shape(bias) != [n] {
            return Err(mismatch("layer_norm", &shape, self.shape(bias)));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / n.max(1);
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, o) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            let (mean, rstd) = (T::of_f64(mean), T::of_f64(rstd));
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                o[j] = xhat * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            ng,
        ))
    }

    /// Gathers rows of a 2-D table; the backward pass scatter-adds, so a
    /// row selected twice receives both gradients.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "gather_rows")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&tv[id * cols..(id + 1) * cols]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Embedding lookup: one table row per id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "slice_cols")?;
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { a, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|x| x.as_f64()).sum();
        let ng = self.ng(a);
        self.push(vec![], vec![T::of_f64(s)], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(vec![], vec![T::of_f64(s)], Op::Mean(a), ng)
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.matrix_dims(logits, "cross_entropy")?;
        if rows != targets.len() {
            return Err(mismatch(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        if rows == 0 {
            return Err(TensorError::Invalid("cross_entropy over zero rows".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: classes,
                });
            }
            let row = &lv[r * classes..(r + 1) * classes];
            kernels::softmax_into(row, &mut probs[r * classes..(r + 1) * classes]);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let lse = max
                + row
                    .iter()
                    .map(|x| (x.as_f64() - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[t].as_f64();
        }
        let loss = T::of_f64(total / rows as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    /// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f32]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return Err(mismatch(
                "binary_cross_entropy",
                self.shape(p),
                &[targets.len()],
            ));
        }
        if pv.is_empty() {
            return Err(TensorError::Invalid(
                "binary_cross_entropy over zero elements".into(),
            ));
        }
        let eps = BCE_EPS as f64;
        let mut total = 0f64;
        for (&pi, &y) in pv.iter().zip(targets) {
            let pc = pi.as_f64().clamp(eps, 1.0 - eps);
            let y = y as f64;
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let loss = T::of_f64(total / pv.len() as f64);
        let ng = self.ng(p);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over a packed batch.
    ///
    /// `q`, `k`, `v` are `[batch·seq, hidden]` with heads laid out as
    /// contiguous column blocks. `keep[b·seq + j]` says whether key `j` of
    /// sequence `b` may be attended to; masked keys get exactly zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        keep: &[bool],
    ) -> Result<Var> {
        let (rows, hidden) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != [rows, hidden] || self.shape(v) != [rows, hidden] {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        if rows != batch * seq || keep.len() != rows {
            return Err(mismatch("attention", &[rows], &[batch, seq]));
        }
        if heads == 0 || hidden % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "hidden size {hidden} is not divisible by {heads} heads"
            )));
        }
        let d = hidden / heads;
        let scale = T::of_f64(1.0 / (d as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * hidden];
        let mut scores = vec![T::zero(); seq];
        let mut dense = vec![T::zero(); seq];
        for b in 0..batch {
            let kept: Vec<usize> = (0..seq).filter(|&j| keep[b * seq + j]).collect();
            for h in 0..heads {
                let col = h * d;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * hidden + col..][..d];
                    for (s, &j) in scores.iter_mut().zip(&kept) {
                        *s = kernels::dot(qi, &kv[(b * seq + j) * hidden + col..][..d]) * scale;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let dense = &mut dense[..kept.len()];
                    if !kept.is_empty() {
                        kernels::softmax_into(&scores[..kept.len()], dense);
                    }
                    let o = &mut out[(b * seq + i) * hidden + col..][..d];
                    for (&j, &pj) in kept.iter().zip(dense.iter()) {
                        p[j] = pj;
                        kernels::axpy(pj, &vv[(b * seq + j) * hidden + col..][..d], o);
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let geom = AttnGeom {
            batch,
            seq,
            heads,
            hidden,
            keep: keep.to_vec(),
        };
        Ok(self.push(
            vec![rows, hidden],
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// trainable leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(TensorError::NotScalar(n.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        if !n.needs_grad {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited.push(i);
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Returns the gradient buffer of `v` when it participates in
        // differentiation.
        fn buf<'a, T: Real>(
            nodes: &[Node<T>],
            grads: &'a mut [Option<Vec<T>>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
        }
        let val = |v: Var| nodes[v.0].value.as_slice();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = buf(nodes, grads, a) {
                    kernels::gemm_nt(g, val(b), ga, m, n, k);
                }
                if let Some(gb) = buf(nodes, grads, b) {
                    kernels::gemm_tn(val(a), g, gb, k, m, n);
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                if let Some(ga) = buf(nodes, grads, a) {
                    kernels::gemm_nn(g, val(b), ga, m, n, k);
                }
                if let Some(gb) = buf(nodes, grads, b) {
                    kernels::gemm_tn(g, val(a), gb, n, m, k);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = buf(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = buf(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = buf(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = buf(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = buf(nodes, grads, a) {
                    for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(val(b)) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = buf(nodes, grads, b) {
                    for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(val(a)) {
                        *x += gi * ai;
                    }
                }
            }
            &Op::AddBias { a, bias } => {
                if let Some(ga) = buf(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                let n = nodes[bias.0].value.len();
                if let Some(gb) = buf(nodes, grads, bias) {
                    let mut acc = vec![0f64; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(s, y)| *s += y.as_f64());
                    }
                    gb.iter_mut()
                        .zip(&acc)
                        .for_each(|(x, &s)| *x += T::of_f64(s));
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = buf(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y);
                }
            }
            &Op::Gelu(a) => {
                if let Some(ga) = buf(nodes, grads, a) {
                    for ((x, &gi), &ai) in ga.iter_mut().zip(g).zip(val(a)) {
                        *x += gi * kernels::gelu_grad(ai);
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = buf(nodes, grads, a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *x += gi * (T::one() - y * y);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = buf(nodes, grads, a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *x += gi * y * (T::one() - y);
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                let n = last_dim(&node.shape);
                if let Some(ga) = buf(nodes, grads, a) {
                    for ((p, dp), dx) in node.value.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n))
                    {
                        kernels::softmax_backward_into(p, dp, dx);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let n = last_dim(&node.shape);
                let (xv, gv) = (val(*x), val(*gain));
                let xhat = |r: usize, j: usize| (xv[r * n + j] - mean[r]) * rstd[r];
                if let Some(gb) = buf(nodes, grads, *bias) {
                    let mut acc = vec![0f64; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(s, y)| *s += y.as_f64());
                    }
                    gb.iter_mut()
                        .zip(&acc)
                        .for_each(|(b, &s)| *b += T::of_f64(s));
                }
                if let Some(gg) = buf(nodes, grads, *gain) {
                    let mut acc = vec![0f64; n];
                    for (r, row) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            acc[j] += (row[j] * xhat(r, j)).as_f64();
                        }
                    }
                    gg.iter_mut()
                        .zip(&acc)
                        .for_each(|(b, &s)| *b += T::of_f64(s));
                }
                if let Some(gx) = buf(nodes, grads, *x) {
                    for (r, row) in g.chunks(n).enumerate() {
                        let mut m1 = 0f64;
                        let mut m2 = 0f64;
                        for j in 0..n {
                            let dxh = (row[j] * gv[j]).as_f64();
                            m1 += dxh;
                            m2 += dxh * xhat(r, j).as_f64();
                        }
                        let (m1, m2) = (T::of_f64(m1 / n as f64), T::of_f64(m2 / n as f64));
                        for j in 0..n {
                            let dxh = row[j] * gv[j];
                            gx[r * n + j] += rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let cols = last_dim(&node.shape);
                if let Some(gt) = buf(nodes, grads, *table) {
                    for (row, &id) in g.chunks(cols).zip(ids) {
                        gt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::SliceCols { a, start } => {
                let len = last_dim(&node.shape);
                let cols = last_dim(&nodes[a.0].shape);
                if let Some(ga) = buf(nodes, grads, a) {
                    for (r, row) in g.chunks(len.max(1)).enumerate() {
                        ga[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = buf(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = buf(nodes, grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                let n = T::of_f64(nodes[a.0].value.len().max(1) as f64);
                if let Some(ga) = buf(nodes, grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let classes = probs.len() / rows;
                let s = g[0] / T::of_f64(rows as f64);
                if let Some(gl) = buf(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            gl[r * classes + c] += s * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Bce { p, targets } => {
                let pv = val(*p);
                let s = g[0].as_f64() / pv.len() as f64;
                let eps = BCE_EPS as f64;
                if let Some(gp) = buf(nodes, grads, *p) {
                    for ((x, &pi), &y) in gp.iter_mut().zip(pv).zip(targets) {
                        let pi = pi.as_f64();
                        if pi <= eps || pi >= 1.0 - eps {
                            continue;
                        }
                        let y = y as f64;
                        *x += T::of_f64(s * (-(y / pi) + (1.0 - y) / (1.0 - pi)));
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => self.attention_backward(*q, *k, *v, geom, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: &AttnGeom,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttnGeom {
            batch,
            seq,
            heads,
            hidden,
            ref keep,
        } = *geom;
        let d = hidden / heads;
        let scale = T::of_f64(1.0 / (d as f64).sqrt());
        let (qv, kv, vv) = (
            self.nodes[q.0].value.as_slice(),
            self.nodes[k.0].value.as_slice(),
            self.nodes[v.0].value.as_slice(),
        );
        let rows = batch * seq;
        let mut gq = vec![T::zero(); rows * hidden];
        let mut gk = vec![T::zero(); rows * hidden];
        let mut gv = vec![T::zero(); rows * hidden];
        let mut dp = vec![T::zero(); seq];
        let mut ds = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * d;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let gi = &g[(b * seq + i) * hidden + col..][..d];
                    for j in 0..seq {
                        dp[j] = if keep[b * seq + j] {
                            kernels::dot(gi, &vv[(b * seq + j) * hidden + col..][..d])
                        } else {
                            T::zero()
                        };
                        if p[j] != T::zero() {
                            kernels::axpy(p[j], gi, &mut gv[(b * seq + j) * hidden + col..][..d]);
                        }
                    }
                    ds.iter_mut().for_each(|x| *x = T::zero());
                    kernels::softmax_backward_into(p, &dp, &mut ds);
                    let qi = &qv[(b * seq + i) * hidden + col..][..d];
                    for j in 0..seq {
                        if ds[j] == T::zero() {
                            continue;
                        }
                        let c = ds[j] * scale;
                        kernels::axpy(
                            c,
                            &kv[(b * seq + j) * hidden + col..][..d],
                            &mut gq[(b * seq + i) * hidden + col..][..d],
                        );
                        kernels::axpy(c, qi, &mut gk[(b * seq + j) * hidden + col..][..d]);
                    }
                }
            }
        }
        for (var, src) in [(q, gq), (k, gk), (v, gv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            let len = self.nodes[var.0].value.len();
            let dst = grads[var.0].get_or_insert_with(|| vec![T::zero(); len]);
            dst.iter_mut().zip(&src).for_each(|(x, &y)| *x += y);
        }
    }
}
