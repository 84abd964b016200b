use std::sync::atomic::{AtomicU64, Ordering};

use super::{gemm, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Masked attention scores are set to this instead of `-inf` so every
/// intermediate stays finite.
const MASKED: f64 = -1.0e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

/// Contiguous run of rows forming one causal sequence inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Sum(usize),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(usize),
    Embedding { table: usize, ids: Vec<usize> },
    GatherRows { x: usize, rows: Vec<usize> },
    CausalScores { q: usize, k: usize, scale: T },
    Attention { qkv: usize, segments: Vec<Segment>, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<T>, total: T, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid topological order for backward.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let u = c * (x + a * x3);
    let t = u.tanh();
    let value = half * x * (one + t);
    let du = c * (one + T::c(3.0) * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok(())
}

fn matrix(op: &'static str, t: &[usize]) -> Result<(usize, usize), TensorError> {
    match t {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::ShapeMismatch { op, lhs: t.to_vec(), rhs: vec![0, 0] }),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { id: self.nodes.len() - 1, tape: self.id }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Records an input. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Gradient of the last backward pass; zeros when `v` did not influence
    /// the loss.
    pub fn grad(&self, v: Var) -> Result<Tensor<T>, TensorError> {
        let i = self.idx(v)?;
        Ok(self.grads.get(i).and_then(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape())))
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("add", ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Add(ia, ib), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("mul", ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::Mul(ia, ib), ng))
    }

    /// `a[n, m] + bias[m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (_, cols) = matrix("add_row", ta.shape())?;
        same_shape("add_row", &[cols], tb.shape())?;
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::AddRow(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let out = Tensor::from_vec(ta.shape(), ta.data().iter().map(|&x| x * s).collect())?;
        let ng = self.needs(&[ia]);
        Ok(self.push(out, Op::Scale(ia, s), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let total = self.nodes[ia].value.data().iter().copied().sum();
        let ng = self.needs(&[ia]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(ia), ng))
    }

    /// `a[n, k] @ b[k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, k) = matrix("matmul", ta.shape())?;
        let (k2, m) = matrix("matmul", tb.shape())?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            n,
            k,
            m,
            (ta.data(), 0, k as isize, 1),
            (tb.data(), 0, m as isize, 1),
            T::zero(),
            (out.data_mut(), 0, m as isize, 1),
        );
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), ng))
    }

    /// `a[n, k] @ b[m, k]^T`, used for the tied output projection.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, k) = matrix("matmul_bt", ta.shape())?;
        let (m, k2) = matrix("matmul_bt", tb.shape())?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_bt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            n,
            k,
            m,
            (ta.data(), 0, k as isize, 1),
            (tb.data(), 0, 1, k as isize),
            T::zero(),
            (out.data_mut(), 0, m as isize, 1),
        );
        let ng = self.needs(&[ia, ib]);
        Ok(self.push(out, Op::MatMulBt(ia, ib), ng))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let (_, cols) = ta.dims2();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.needs(&[ia]);
        Ok(self.push(out, Op::Softmax(ia), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let tx = &self.nodes[ix].value;
        let (rows, cols) = matrix("layer_norm", tx.shape())?;
        same_shape("layer_norm", &[cols], self.nodes[ig].value.shape())?;
        same_shape("layer_norm", &[cols], self.nodes[ib].value.shape())?;
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let inv_n = T::one() / T::c(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::from_vec(&[rows, cols], out)?;
        let ng = self.needs(&[ix, ig, ib]);
        Ok(self.push(out, Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, rstd }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let out = Tensor::from_vec(ta.shape(), ta.data().iter().map(|&x| gelu_parts(x).0).collect())?;
        let ng = self.needs(&[ia]);
        Ok(self.push(out, Op::Gelu(ia), ng))
    }

    /// Gathers rows of `table[v, d]` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let it = self.idx(table)?;
        let tt = &self.nodes[it].value;
        let (v, d) = matrix("embedding", tt.shape())?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, limit: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::from_vec(&[ids.len(), d], out)?;
        let ng = self.needs(&[it]);
        Ok(self.push(out, Op::Embedding { table: it, ids: ids.to_vec() }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let ix = self.idx(x)?;
        let tx = &self.nodes[ix].value;
        let (n, d) = matrix("gather_rows", tx.shape())?;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: r, limit: n });
            }
            out.extend_from_slice(tx.row(r));
        }
        let out = Tensor::from_vec(&[rows.len(), d], out)?;
        let ng = self.needs(&[ix]);
        Ok(self.push(out, Op::GatherRows { x: ix, rows: rows.to_vec() }, ng))
    }

    /// Single-head scaled scores `q k^T / sqrt(d)` with future positions
    /// masked to a large negative constant.
    pub fn causal_masked_attention_scores(&mut self, q: Var, k: Var) -> Result<Var, TensorError> {
        let (iq, ik) = (self.idx(q)?, self.idx(k)?);
        let (tq, tk) = (&self.nodes[iq].value, &self.nodes[ik].value);
        let (t, d) = matrix("causal_scores", tq.shape())?;
        same_shape("causal_scores", tq.shape(), tk.shape())?;
        let scale = T::one() / T::c(d as f64).sqrt();
        let mut out = Tensor::zeros(&[t, t]);
        gemm(
            t,
            d,
            t,
            (tq.data(), 0, d as isize, 1),
            (tk.data(), 0, 1, d as isize),
            T::zero(),
            (out.data_mut(), 0, t as isize, 1),
        );
        for i in 0..t {
            for j in 0..t {
                let s = &mut out.data_mut()[i * t + j];
                *s = if j > i { T::c(MASKED) } else { *s * scale };
            }
        }
        let ng = self.needs(&[iq, ik]);
        Ok(self.push(out, Op::CausalScores { q: iq, k: ik, scale }, ng))
    }

    /// Fused multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[n, 3d]` laid out as `[q | k | v]`, each split into `heads`
    /// contiguous head slices. Rows outside every segment produce zeros.
    pub fn attention(&mut self, qkv: Var, segments: &[Segment], heads: usize) -> Result<Var, TensorError> {
        let iq = self.idx(qkv)?;
        let tq = &self.nodes[iq].value;
        let (n, w) = matrix("attention", tq.shape())?;
        if heads == 0 || w % (3 * heads) != 0 {
            return Err(TensorError::ShapeMismatch { op: "attention", lhs: tq.shape().to_vec(), rhs: vec![heads] });
        }
        for s in segments {
            if s.len == 0 || s.start + s.len > n {
                return Err(TensorError::IndexOutOfRange { op: "attention", index: s.start + s.len, limit: n });
            }
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let total: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![T::zero(); total];
        let mut out = Tensor::zeros(&[n, d]);
        let x = tq.data();
        let w3 = w as isize;
        let mut off = 0;
        for s in segments {
            let len = s.len;
            for h in 0..heads {
                let p = &mut probs[off..off + len * len];
                let q_off = s.start * w + h * dh;
                gemm(len, dh, len, (x, q_off, w3, 1), (x, q_off + d, 1, w3), T::zero(), (p, 0, len as isize, 1));
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    for v in row[..=i].iter_mut() {
                        *v *= scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    for v in row[i + 1..].iter_mut() {
                        *v = T::zero();
                    }
                }
                gemm(
                    len,
                    len,
                    dh,
                    (p, 0, len as isize, 1),
                    (x, q_off + 2 * d, w3, 1),
                    T::zero(),
                    (out.data_mut(), s.start * d + h * dh, d as isize, 1),
                );
                off += len * len;
            }
        }
        let ng = self.needs(&[iq]);
        Ok(self.push(out, Op::Attention { qkv: iq, segments: segments.to_vec(), heads, probs }, ng))
    }

    /// Weighted mean negative log-likelihood:
    /// `sum_t w_t * -log softmax(logits_t)[target_t] / sum_t w_t`.
    /// Rows with zero weight are skipped entirely.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var, TensorError> {
        let il = self.idx(logits)?;
        let tl = &self.nodes[il].value;
        let (n, v) = matrix("cross_entropy", tl.shape())?;
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let mut total = T::zero();
        for (position, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < T::zero() {
                return Err(TensorError::InvalidWeight { position, weight: w.to_f64().unwrap_or(f64::NAN) });
            }
            total += w;
        }
        if total <= T::zero() {
            return Err(TensorError::NoLossBearingTokens);
        }
        let mut probs = vec![T::zero(); n * v];
        let mut loss = 0.0f64;
        for r in 0..n {
            if weights[r] == T::zero() {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: t, limit: v });
            }
            let row = tl.row(r);
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            let lse = softmax_in_place(p);
            let nll = lse - row[t];
            loss += (weights[r] * nll).to_f64().unwrap();
        }
        let loss = T::c(loss) / total;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy"));
        }
        let ng = self.needs(&[il]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: il, targets: targets.to_vec(), weights: weights.to_vec(), total, probs },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss. Every recorded node is visited at
    /// most once.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let il = self.idx(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[il].value.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = Tensor::zeros(self.nodes[il].value.shape());
        seed.data_mut()[0] = T::one();
        grads[il] = Some(seed);
        let mut keep: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for id in (0..=il).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            keep[id] = Some(g);
        }
        self.grads = keep;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let gd = g.data();
        let want = |i: usize| nodes[i].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if want(i) {
                        add_into(slot(grads, nodes, i), gd);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if want(*a) {
                    let s = slot(grads, nodes, *a);
                    for ((x, &gg), &y) in s.iter_mut().zip(gd).zip(vb) {
                        *x += gg * y;
                    }
                }
                if want(*b) {
                    let s = slot(grads, nodes, *b);
                    for ((x, &gg), &y) in s.iter_mut().zip(gd).zip(va) {
                        *x += gg * y;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if want(*a) {
                    add_into(slot(grads, nodes, *a), gd);
                }
                if want(*b) {
                    let cols = nodes[*b].value.len();
                    let s = slot(grads, nodes, *b);
                    for row in gd.chunks_exact(cols) {
                        add_into(s, row);
                    }
                }
            }
            Op::Scale(a, k) => {
                if want(*a) {
                    let s = slot(grads, nodes, *a);
                    for (x, &gg) in s.iter_mut().zip(gd) {
                        *x += gg * *k;
                    }
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let g0 = gd[0];
                    for x in slot(grads, nodes, *a).iter_mut() {
                        *x += g0;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = nodes[*a].value.dims2();
                let (_, m) = nodes[*b].value.dims2();
                if want(*a) {
                    let vb = nodes[*b].value.data();
                    gemm(
                        n,
                        m,
                        k,
                        (gd, 0, m as isize, 1),
                        (vb, 0, 1, m as isize),
                        T::one(),
                        (slot(grads, nodes, *a), 0, k as isize, 1),
                    );
                }
                if want(*b) {
                    let va = nodes[*a].value.data();
                    gemm(
                        k,
                        n,
                        m,
                        (va, 0, 1, k as isize),
                        (gd, 0, m as isize, 1),
                        T::one(),
                        (slot(grads, nodes, *b), 0, m as isize, 1),
                    );
                }
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = nodes[*a].value.dims2();
                let (m, _) = nodes[*b].value.dims2();
                if want(*a) {
                    let vb = nodes[*b].value.data();
                    gemm(
                        n,
                        m,
                        k,
                        (gd, 0, m as isize, 1),
                        (vb, 0, k as isize, 1),
                        T::one(),
                        (slot(grads, nodes, *a), 0, k as isize, 1),
                    );
                }
                if want(*b) {
                    let va = nodes[*a].value.data();
                    gemm(
                        m,
                        n,
                        k,
                        (gd, 0, 1, m as isize),
                        (va, 0, k as isize, 1),
                        T::one(),
                        (slot(grads, nodes, *b), 0, k as isize, 1),
                    );
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    let y = node.value.data();
                    let (_, cols) = node.value.dims2();
                    let s = slot(grads, nodes, *a);
                    for ((srow, yrow), grow) in
                        s.chunks_exact_mut(cols).zip(y.chunks_exact(cols)).zip(gd.chunks_exact(cols))
                    {
                        let dot: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                        for ((x, &p), &q) in srow.iter_mut().zip(yrow).zip(grow) {
                            *x += p * (q - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (rows, cols) = nodes[*x].value.dims2();
                let gv = nodes[*gain].value.data();
                if want(*gain) {
                    let s = slot(grads, nodes, *gain);
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += gd[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if want(*bias) {
                    let s = slot(grads, nodes, *bias);
                    for row in gd.chunks_exact(cols) {
                        add_into(s, row);
                    }
                }
                if want(*x) {
                    let inv_n = T::one() / T::c(cols as f64);
                    let s = slot(grads, nodes, *x);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let v = gd[r * cols + c] * gv[c];
                            dxhat[c] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * cols + c];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for c in 0..cols {
                            s[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if want(*a) {
                    let xa = nodes[*a].value.data();
                    let s = slot(grads, nodes, *a);
                    for ((x, &gg), &v) in s.iter_mut().zip(gd).zip(xa) {
                        *x += gg * gelu_parts(v).1;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if want(*table) {
                    let (_, d) = nodes[*table].value.dims2();
                    let s = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if want(*x) {
                    let (_, d) = nodes[*x].value.dims2();
                    let s = slot(grads, nodes, *x);
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut s[src * d..(src + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CausalScores { q, k, scale } => {
                let (t, d) = nodes[*q].value.dims2();
                let mut gm = gd.to_vec();
                for i in 0..t {
                    for j in 0..t {
                        gm[i * t + j] = if j > i { T::zero() } else { gm[i * t + j] * *scale };
                    }
                }
                if want(*q) {
                    let vk = nodes[*k].value.data();
                    gemm(
                        t,
                        t,
                        d,
                        (&gm, 0, t as isize, 1),
                        (vk, 0, d as isize, 1),
                        T::one(),
                        (slot(grads, nodes, *q), 0, d as isize, 1),
                    );
                }
                if want(*k) {
                    let vq = nodes[*q].value.data();
                    gemm(
                        t,
                        t,
                        d,
                        (&gm, 0, 1, t as isize),
                        (vq, 0, d as isize, 1),
                        T::one(),
                        (slot(grads, nodes, *k), 0, d as isize, 1),
                    );
                }
            }
            Op::Attention { qkv, segments, heads, probs } => {
                if !want(*qkv) {
                    return;
                }
                let x = nodes[*qkv].value.data();
                let (_, w) = nodes[*qkv].value.dims2();
                let d = w / 3;
                let dh = d / heads;
                let scale = T::one() / T::c(dh as f64).sqrt();
                let w3 = w as isize;
                let s = slot(grads, nodes, *qkv);
                let mut off = 0;
                let max_len = segments.iter().map(|s| s.len).max().unwrap_or(0);
                let mut dp = vec![T::zero(); max_len * max_len];
                for seg in segments {
                    let len = seg.len;
                    for h in 0..*heads {
                        let p = &probs[off..off + len * len];
                        let q_off = seg.start * w + h * dh;
                        let go = (gd, seg.start * d + h * dh, d as isize, 1);
                        // dV += P^T dO
                        gemm(len, len, dh, (p, 0, 1, len as isize), go, T::one(), (&mut *s, q_off + 2 * d, w3, 1));
                        // dP = dO V^T
                        let dpv = &mut dp[..len * len];
                        gemm(len, dh, len, go, (x, q_off + 2 * d, 1, w3), T::zero(), (&mut *dpv, 0, len as isize, 1));
                        for i in 0..len {
                            let prow = &p[i * len..(i + 1) * len];
                            let drow = &mut dpv[i * len..(i + 1) * len];
                            let dot: T = prow[..=i].iter().zip(&drow[..=i]).map(|(&a, &b)| a * b).sum();
                            for j in 0..len {
                                drow[j] = if j > i { T::zero() } else { prow[j] * (drow[j] - dot) * scale };
                            }
                        }
                        // dQ += dS K ; dK += dS^T Q
                        gemm(
                            len,
                            len,
                            dh,
                            (&*dpv, 0, len as isize, 1),
                            (x, q_off + d, w3, 1),
                            T::one(),
                            (&mut *s, q_off, w3, 1),
                        );
                        gemm(
                            len,
                            len,
                            dh,
                            (&*dpv, 0, 1, len as isize),
                            (x, q_off, w3, 1),
                            T::one(),
                            (&mut *s, q_off + d, w3, 1),
                        );
                        off += len * len;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, total, probs } => {
                if !want(*logits) {
                    return;
                }
                let (_, v) = nodes[*logits].value.dims2();
                let g0 = gd[0];
                let s = slot(grads, nodes, *logits);
                for (r, (&w, &t)) in weights.iter().zip(targets).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let coef = g0 * w / *total;
                    let row = &mut s[r * v..(r + 1) * v];
                    for (x, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *x += coef * p;
                    }
                    row[t] -= coef;
                }
            }
        }
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize) -> &'a mut [T] {
    grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape())).data_mut()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

/// In-place max-subtracted softmax; returns the log-sum-exp of the input.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
    max + z.ln()
}
