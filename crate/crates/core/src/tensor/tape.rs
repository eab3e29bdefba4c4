use std::borrow::Cow;

use rand::Rng;

use super::kernels::{axpy, dot, gemm_acc, gemm_at_acc, gemm_bt_acc, softmax_in_place};
use super::{mismatch, Float, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Packed-sequence layout for multi-head self-attention.
///
/// Rows of the packed `[T, d]` inputs are grouped into contiguous segments
/// (one per sequence); attention never crosses a segment boundary. Keys with
/// `key_mask[row] == false` receive an additive `-1e9` before the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub segments: Vec<(usize, usize)>,
    pub heads: usize,
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionSpec {
    fn score_len(&self) -> usize {
        self.segments.iter().map(|&(_, len)| len * len).sum::<usize>() * self.heads
    }
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    spec: AttentionSpec,
    probs: Vec<T>,
    // Post-dropout weights, scaled; only present when dropout was applied.
    dropped: Option<(Vec<T>, Vec<T>)>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(T, T)>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention(Box<AttentionCache<T>>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Vec<Var>),
}

struct Node<'a, T: Float> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records differentiable operations in execution order.
///
/// Parameters may be borrowed (`param`) so a forward pass never copies
/// weights. `backward` adds into persistent per-leaf gradient buffers:
/// calling it twice without [`Tape::zero_grad`] doubles every gradient.
pub struct Tape<'a, T: Float = f32> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Float> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// A trainable leaf borrowed from the caller.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(tensor), Op::Leaf, true)
    }

    /// A trainable leaf owned by the tape.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(m, k, n, self.data(a), self.data(b), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_owned(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_owned(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_owned(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push_owned(value, Op::Scale(x, factor), &[x])
    }

    /// `x[m,n] + bias[n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(mismatch(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let mut value = self.value(x).clone();
        let b = self.data(bias);
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push_owned(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x · w + b` for a `[in, out]` weight.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Normalizes each row over its last dimension (biased variance), then
    /// scales by `gain` and shifts by `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let dn = T::from_usize(d).unwrap();
        let mut value = self.value(x).clone();
        let (g, b) = (self.data(gain), self.data(bias));
        let mut stats = Vec::with_capacity(value.rows());
        for row in value.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *v = (*v - mean) * rstd * gv + bv;
            }
            stats.push((mean, rstd));
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        };
        Ok(self.push_owned(value, op, &[x, gain, bias]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        self.push_owned(value, Op::Gelu(x), &[x])
    }

    /// Gathers rows of `table[V, d]` by id into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(mismatch("embedding", format!("table {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push_owned(value, op, &[table]))
    }

    /// Picks rows of a 2-D value, e.g. the first token of every sequence.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    size: n,
                });
            }
            out.extend_from_slice(self.value(x).row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        let op = Op::SelectRows {
            x,
            rows: rows.to_vec(),
        };
        Ok(self.push_owned(value, op, &[x]))
    }

    /// Inverted dropout: zeroes each element with probability `p`, scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let mask = dropout_mask(self.value(x).len(), p, rng);
        let mut value = self.value(x).clone();
        for (v, &m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push_owned(value, Op::Dropout { x, mask }, &[x])
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
    ) -> Result<Var, TensorError> {
        self.attention_inner(q, k, v, spec.clone(), None)
    }

    /// Attention with inverted dropout on the attention weights.
    pub fn attention_with_dropout<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        p: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let mask = (p > 0.0).then(|| dropout_mask(spec.score_len(), p, rng));
        self.attention_inner(q, k, v, spec.clone(), mask)
    }

    fn attention_inner(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        drop_mask: Option<Vec<T>>,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice()
        {
            return Err(mismatch(
                "attention",
                format!("q {:?} k {:?} v {:?}", shape, self.shape(k), self.shape(v)),
            ));
        }
        let (rows, d) = (shape[0], shape[1]);
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(mismatch(
                "attention",
                format!("width {d} not divisible by {} heads", spec.heads),
            ));
        }
        for &(start, len) in &spec.segments {
            if start + len > rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "attention",
                    index: start + len,
                    size: rows,
                });
            }
        }
        if let Some(mask) = &spec.key_mask {
            if mask.len() != rows {
                return Err(mismatch(
                    "attention",
                    format!("key mask of {} for {rows} rows", mask.len()),
                ));
            }
        }
        let dh = d / spec.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let masked = T::lit(-1e9);
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::with_capacity(spec.score_len());
        let mut dropped = drop_mask.as_ref().map(|m| Vec::with_capacity(m.len()));
        let mut row_buf = Vec::new();
        for &(start, len) in &spec.segments {
            for h in 0..spec.heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qd[(start + i) * d + off..(start + i) * d + off + dh];
                    row_buf.clear();
                    for j in 0..len {
                        let kj = &kd[(start + j) * d + off..(start + j) * d + off + dh];
                        let mut s = dot(qi, kj) * scale;
                        if let Some(mask) = &spec.key_mask {
                            if !mask[start + j] {
                                s += masked;
                            }
                        }
                        row_buf.push(s);
                    }
                    softmax_in_place(&mut row_buf);
                    let base = probs.len();
                    probs.extend_from_slice(&row_buf);
                    if let (Some(mask), Some(dropped)) = (&drop_mask, dropped.as_mut()) {
                        for (j, p) in row_buf.iter_mut().enumerate() {
                            *p *= mask[base + j];
                        }
                        dropped.extend_from_slice(&row_buf);
                    }
                    let out_row = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for (j, &p) in row_buf.iter().enumerate() {
                        axpy(p, &vd[(start + j) * d + off..(start + j) * d + off + dh], out_row);
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let cache = AttentionCache {
            q,
            k,
            v,
            spec,
            probs,
            dropped: drop_mask.zip(dropped),
        };
        Ok(self.push_owned(value, Op::Attention(Box::new(cache)), &[q, k, v]))
    }

    /// Mean softmax cross-entropy over the rows of `logits[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (b, c) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != b {
            return Err(mismatch(
                "cross_entropy",
                format!("{b} rows but {} targets", targets.len()),
            ));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: c,
                });
            }
            let row = self.value(logits).row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let loss = total / T::from_usize(b.max(1)).unwrap();
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push_owned(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push_owned(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Arithmetic mean of scalar values.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(mismatch("mean", "no inputs".into()));
        }
        let mut total = T::zero();
        for &x in xs {
            if self.value(x).len() != 1 {
                return Err(mismatch("mean", format!("non-scalar {:?}", self.shape(x))));
            }
            total += self.data(x)[0];
        }
        let value = Tensor::scalar(total / T::from_usize(xs.len()).unwrap());
        Ok(self.push_owned(value, Op::Mean(xs.to_vec()), xs))
    }

    /// Gradient accumulated on `v`; zeros if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn take_grad(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Propagates d(loss)/d(·) back through the tape in reverse execution
    /// order and adds the result into every trainable leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let slot = &mut self.grads[i];
                    match slot {
                        Some(t) => {
                            for (a, &b) in t.data_mut().iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => {
                            *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.nodes[a.0].needs_grad {
                        let da = acc(&mut adj, *a, m * k);
                        gemm_bt_acc(m, k, n, &g, self.nodes[b.0].value.data(), da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = acc(&mut adj, *b, k * n);
                        gemm_at_acc(m, k, n, self.nodes[a.0].value.data(), &g, db);
                    }
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if self.nodes[x.0].needs_grad {
                            let dx = acc(&mut adj, x, g.len());
                            add_into(dx, &g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let bd = self.nodes[b.0].value.data();
                        let da = acc(&mut adj, *a, g.len());
                        for ((d, &gv), &bv) in da.iter_mut().zip(&g).zip(bd) {
                            *d += gv * bv;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let ad = self.nodes[a.0].value.data();
                        let db = acc(&mut adj, *b, g.len());
                        for ((d, &gv), &av) in db.iter_mut().zip(&g).zip(ad) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    let dx = acc(&mut adj, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(&g) {
                        *d += gv * *factor;
                    }
                }
                Op::AddBias(x, bias) => {
                    let n = self.nodes[bias.0].value.len();
                    if self.nodes[x.0].needs_grad {
                        add_into(acc(&mut adj, *x, g.len()), &g);
                    }
                    if self.nodes[bias.0].needs_grad {
                        let db = acc(&mut adj, *bias, n);
                        for row in g.chunks(n) {
                            add_into(db, row);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let xv = self.nodes[x.0].value.data();
                    let gv = self.nodes[gain.0].value.data();
                    let d = gv.len();
                    let dn = T::from_usize(d).unwrap();
                    let mut dgain = vec![T::zero(); d];
                    let mut dbias = vec![T::zero(); d];
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            dgain[j] += gr[j] * xhat;
                            dbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat;
                        }
                        let mean_dxhat = sum_dxhat / dn;
                        let mean_dxhat_xhat = sum_dxhat_xhat / dn;
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            dxr[j] = rstd * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    let (x, gain, bias) = (*x, *gain, *bias);
                    if self.nodes[x.0].needs_grad {
                        add_into(acc(&mut adj, x, dx.len()), &dx);
                    }
                    if self.nodes[gain.0].needs_grad {
                        add_into(acc(&mut adj, gain, d), &dgain);
                    }
                    if self.nodes[bias.0].needs_grad {
                        add_into(acc(&mut adj, bias, d), &dbias);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let dx = acc(&mut adj, *x, g.len());
                    for ((d, &gv), &xi) in dx.iter_mut().zip(&g).zip(xv) {
                        *d += gv * gelu_grad(xi);
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = self.nodes[table.0].value.cols();
                    let total = self.nodes[table.0].value.len();
                    let dt = acc(&mut adj, *table, total);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
                Op::SelectRows { x, rows } => {
                    let d = self.nodes[x.0].value.cols();
                    let total = self.nodes[x.0].value.len();
                    let dx = acc(&mut adj, *x, total);
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut dx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
                Op::Dropout { x, mask } => {
                    let dx = acc(&mut adj, *x, g.len());
                    for ((d, &gv), &m) in dx.iter_mut().zip(&g).zip(mask) {
                        *d += gv * m;
                    }
                }
                Op::Attention(cache) => {
                    let (dq, dk, dv) = attention_backward(&self.nodes, cache, &g);
                    for (var, grad) in [(cache.q, dq), (cache.k, dk), (cache.v, dv)] {
                        if self.nodes[var.0].needs_grad {
                            add_into(acc(&mut adj, var, grad.len()), &grad);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = self.nodes[logits.0].value.cols();
                    let scale = g[0] / T::from_usize(targets.len().max(1)).unwrap();
                    let dl = acc(&mut adj, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut dl[r * c..(r + 1) * c];
                        for (j, (d, &p)) in row.iter_mut().zip(&probs[r * c..]).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *d += scale * (p - onehot);
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    let dx = acc(&mut adj, *x, n);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean(xs) => {
                    let share = g[0] / T::from_usize(xs.len()).unwrap();
                    for &x in xs {
                        if self.nodes[x.0].needs_grad {
                            acc(&mut adj, x, 1)[0] += share;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc<T: Float>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dropout_mask<T: Float, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

const GELU_COEFF: f64 = 0.044715;

fn gelu_scalar<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_COEFF) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(GELU_COEFF);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

fn attention_backward<T: Float>(
    nodes: &[Node<'_, T>],
    cache: &AttentionCache<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let qd = nodes[cache.q.0].value.data();
    let kd = nodes[cache.k.0].value.data();
    let vd = nodes[cache.v.0].value.data();
    let d = nodes[cache.q.0].value.cols();
    let spec = &cache.spec;
    let dh = d / spec.heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dp = Vec::new();
    let mut cursor = 0;
    for &(start, len) in &spec.segments {
        for h in 0..spec.heads {
            let off = h * dh;
            for i in 0..len {
                let ri = (start + i) * d + off;
                let gi = &g[ri..ri + dh];
                let p = &cache.probs[cursor..cursor + len];
                let (weights, mask) = match &cache.dropped {
                    Some((mask, dropped)) => (
                        &dropped[cursor..cursor + len],
                        Some(&mask[cursor..cursor + len]),
                    ),
                    None => (p, None),
                };
                dp.clear();
                for j in 0..len {
                    let rj = (start + j) * d + off;
                    // out_i = Σ_j w_ij v_j
                    let mut dw = dot(gi, &vd[rj..rj + dh]);
                    axpy(weights[j], gi, &mut dv[rj..rj + dh]);
                    if let Some(mask) = mask {
                        dw *= mask[j];
                    }
                    dp.push(dw);
                }
                let inner: T = p.iter().zip(&dp).map(|(&pj, &dpj)| pj * dpj).sum();
                for j in 0..len {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let rj = (start + j) * d + off;
                    axpy(ds, &kd[rj..rj + dh], &mut dq[ri..ri + dh]);
                    axpy(ds, &qd[ri..ri + dh], &mut dk[rj..rj + dh]);
                }
                cursor += len;
            }
        }
    }
    (dq, dk, dv)
}
