//! Dynamically built reverse-mode autodiff graph.
//!
//! Nodes are appended in evaluation order, so creation order is a valid
//! topological order and the reverse sweep is a single backwards pass over
//! the node list. Parameter leaves borrow their values from the
//! [`ParamStore`]; frozen parameters never require a gradient.

use std::collections::HashMap;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Element, Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;
const DEGENERATE_NORM: f64 = 1e-12;

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Cosine {
        u: Var,
        v: Var,
        nu: T,
        nv: T,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Element> {
    params: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    track: bool,
}

impl<'a, T: Element> Graph<'a, T> {
    /// Graph that records gradients for trainable parameters.
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track: true,
        }
    }

    /// Forward-only graph; no node requires a gradient.
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires_grad = self.track && self.params.get(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() > 2 {
            return Err(Error::dim(op, t.shape(), &[]));
        }
        Ok(t.dims2())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (kb, n) = self.mat(b, "matmul")?;
        if k != kb || self.value(b).rank() != 2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut c = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        self.push("matmul", Tensor::new([m, n], c)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a[m,k]`, `b[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, kb) = self.mat(b, "matmul_nt")?;
        if k != kb {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut c = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        self.push("matmul_nt", Tensor::new([m, n], c)?, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.mat(a, "transpose")?;
        let t = self.value(a).transpose2();
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let t = self.map(a, |x| x * c);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    /// `x[m,n] + b` with `b` of `n` elements broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "add_row")?;
        if self.value(b).numel() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for i in 0..m {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push("add_row", out, Op::AddRow(x, b), &[x, b])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| gelu(v).0);
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.exp());
        self.push("exp", t, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Degenerate("log of non-positive value".into()));
        }
        let t = self.map(x, |v| v.ln());
        self.push("log", t, Op::Log(x), &[x])
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        let lo = T::of(lo);
        let t = self.map(x, |v| if v > lo { v } else { lo });
        self.push("clamp_min", t, Op::ClampMin(x, lo), &[x])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax over a square score matrix where row `i` only sees columns `<= i`.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.mat(x, "softmax_rows")?;
        if causal && m != n {
            return Err(Error::dim("causal_softmax_rows", self.shape(x), &[m, m]));
        }
        let tx = self.value(x);
        tx.ensure_finite("softmax_rows")?;
        let mut out = Tensor::zeros(tx.shape());
        for i in 0..m {
            let width = if causal { i + 1 } else { n };
            softmax_into(&tx.row(i)[..width], &mut out.row_mut(i)[..width]);
        }
        self.push("softmax_rows", out, Op::Softmax(x), &[x])
    }

    /// Row-wise normalisation to zero mean / unit variance, then `* gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let nf = T::of(n as f64);
        let tx = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = Tensor::zeros(tx.shape());
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            let xh = &mut xhat[i * n..(i + 1) * n];
            let o = out.row_mut(i);
            for j in 0..n {
                xh[j] = (row[j] - mean) * inv;
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Gathers rows of `table[V,d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.mat(table, "embed")?;
        if ids.is_empty() {
            return Err(Error::Degenerate("embed of empty id sequence".into()));
        }
        let tt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id as i64,
                    bound: vocab,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new([ids.len(), d], data)?;
        self.push(
            "embed",
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Stacks matrices (or vectors, as single rows) in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat of nothing".into()))?;
        let d = self.mat(first, "concat_rows")?.1;
        let mut data = Vec::new();
        for &p in parts {
            let (_, c) = self.mat(p, "concat_rows")?;
            if c != d {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / d;
        let out = Tensor::new([rows, d], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat of nothing".into()))?;
        let m = self.mat(first, "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.mat(p, "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut out = Tensor::zeros(&[m, total]);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..m {
                out.row_mut(i)[off..off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new([len, n], data)?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let out = Tensor::new([m, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    /// Column means of `x[n,d]`, as a rank-1 tensor of `d` elements.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "mean_rows")?;
        let tx = self.value(x);
        let mut acc = vec![T::zero(); n];
        for i in 0..m {
            for (a, &v) in acc.iter_mut().zip(tx.row(i)) {
                *a += v;
            }
        }
        let inv = T::one() / T::of(m as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        self.push("mean_rows", Tensor::new([n], acc)?, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Each row scaled to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.mat(x, "l2_normalize_rows")?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let r = out.row_mut(i);
            let norm = dot(r, r).sqrt();
            if norm.f64() < DEGENERATE_NORM {
                return Err(Error::Degenerate(format!("zero-norm row {i} cannot be normalized")));
            }
            r.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push("l2_normalize_rows", out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// `u·v / (‖u‖‖v‖)` as a one-element tensor.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).numel() != self.value(v).numel() {
            return Err(Error::dim("cosine", self.shape(u), self.shape(v)));
        }
        let (tu, tv) = (self.value(u).data(), self.value(v).data());
        let nu = dot(tu, tu).sqrt();
        let nv = dot(tv, tv).sqrt();
        if nu.f64() < DEGENERATE_NORM || nv.f64() < DEGENERATE_NORM {
            return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
        }
        let c = dot(tu, tv) / (nu * nv);
        self.push("cosine", Tensor::scalar(c), Op::Cosine { u, v, nu, nv }, &[u, v])
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let (m, vocab) = self.mat(logits, "cross_entropy_mean")?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy_mean", self.shape(logits), &[targets.len()]));
        }
        let tl = self.value(logits);
        tl.ensure_finite("cross_entropy_mean")?;
        let mut rows = Vec::new();
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= vocab {
                return Err(Error::Index {
                    what: "cross-entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            rows.push((i, t as usize));
        }
        if rows.is_empty() {
            return Err(Error::Degenerate("every cross-entropy position is ignored".into()));
        }
        let mut probs = vec![T::zero(); rows.len() * vocab];
        let mut total = T::zero();
        for (r, &(i, t)) in rows.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = T::zero();
            for (pv, &x) in p.iter_mut().zip(row) {
                *pv = (x - max).exp();
                z += *pv;
            }
            p.iter_mut().for_each(|v| *v /= z);
            total += z.ln() - (row[t] - max);
        }
        let loss = total / T::of(rows.len() as f64);
        self.push(
            "cross_entropy_mean",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, rows, probs },
            &[logits],
        )
    }

    /// Reverse sweep from a one-element `loss`; consumes the graph.
    ///
    /// Returns the gradient of every reachable trainable parameter. Multiple
    /// uses of one parameter share a leaf, so their contributions are summed.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match (&self.nodes[i].value, &self.nodes[i].op) {
                (Value::Param(id), Op::Leaf) => out.push((*id, g)),
                (_, Op::Leaf) => {}
                _ => self.propagate(i, &g, &mut grads)?,
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(Gradients { entries: out })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v), data).expect("gradient shape")
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).cols();
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g.data(), self.value(b).data(), &mut da);
                    self.send(grads, a, self.like(a, da));
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, self.value(a).data(), g.data(), &mut db);
                    self.send(grads, b, self.like(b, db));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).rows();
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(m, n, k, g.data(), self.value(b).data(), &mut da);
                    self.send(grads, a, self.like(a, da));
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(n, m, k, g.data(), self.value(a).data(), &mut db);
                    self.send(grads, b, self.like(b, db));
                }
            }
            &Op::Transpose(a) => {
                let gt = g.transpose2();
                self.send(grads, a, self.like(a, gt.into_data()));
            }
            &Op::Add(a, b) => {
                self.send(grads, a, g.clone());
                self.send(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.send(grads, a, g.clone());
                if self.wants(b) {
                    let mut nb = g.clone();
                    nb.scale_in_place(-T::one());
                    self.send(grads, b, nb);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let d = g.data().iter().zip(tb).map(|(&gv, &bv)| gv * bv).collect();
                    self.send(grads, a, self.like(a, d));
                }
                if self.wants(b) {
                    let d = g.data().iter().zip(ta).map(|(&gv, &av)| gv * av).collect();
                    self.send(grads, b, self.like(b, d));
                }
            }
            &Op::Scale(a, c) => {
                let mut d = g.clone();
                d.scale_in_place(c);
                self.send(grads, a, d);
            }
            &Op::AddRow(x, b) => {
                self.send(grads, x, g.clone());
                if self.wants(b) {
                    let (m, n) = g.dims2();
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for (d, &gv) in db.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    self.send(grads, b, self.like(b, db));
                }
            }
            &Op::Gelu(x) => {
                let tx = self.value(x).data();
                let d = g.data().iter().zip(tx).map(|(&gv, &xv)| gv * gelu(xv).1).collect();
                self.send(grads, x, self.like(x, d));
            }
            &Op::Exp(x) => {
                let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                self.send(grads, x, self.like(x, d));
            }
            &Op::Log(x) => {
                let tx = self.value(x).data();
                let d = g.data().iter().zip(tx).map(|(&gv, &xv)| gv / xv).collect();
                self.send(grads, x, self.like(x, d));
            }
            &Op::ClampMin(x, lo) => {
                let tx = self.value(x).data();
                let d = g
                    .data()
                    .iter()
                    .zip(tx)
                    .map(|(&gv, &xv)| if xv > lo { gv } else { T::zero() })
                    .collect();
                self.send(grads, x, self.like(x, d));
            }
            &Op::Softmax(x) => {
                let (m, _) = y.dims2();
                let mut d = Tensor::zeros(y.shape());
                for r in 0..m {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - s);
                    }
                }
                self.send(grads, x, self.like(x, d.into_data()));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = g.dims2();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g.row(r)[j] * xhat[r * n + j];
                        }
                    }
                    self.send(grads, *gain, self.like(*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for (d, &v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.send(grads, *bias, self.like(*bias, db));
                }
                if self.wants(*x) {
                    let nf = T::of(n as f64);
                    let mut dx = vec![T::zero(); m * n];
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..m {
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g.row(r)[j] * gv[j];
                        }
                        let s1 = dxhat.iter().copied().sum::<T>();
                        let s2 = dot(&dxhat, xh);
                        let k = inv_std[r] / nf;
                        for j in 0..n {
                            dx[r * n + j] = k * (nf * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                    self.send(grads, *x, self.like(*x, dx));
                }
            }
            Op::Embed { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = vec![T::zero(); tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *a += v;
                    }
                }
                self.send(grads, *table, self.like(*table, dt));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        let d = g.data()[off..off + len].to_vec();
                        self.send(grads, p, self.like(p, d));
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(m * c);
                        for r in 0..m {
                            d.extend_from_slice(&g.row(r)[off..off + c]);
                        }
                        self.send(grads, p, self.like(p, d));
                    }
                    off += c;
                }
            }
            &Op::SliceRows { x, start } => {
                let tx = self.value(x);
                let n = tx.cols();
                let mut d = vec![T::zero(); tx.numel()];
                d[start * n..start * n + g.numel()].copy_from_slice(g.data());
                self.send(grads, x, self.like(x, d));
            }
            &Op::SliceCols { x, start } => {
                let tx = self.value(x);
                let (m, n) = tx.dims2();
                let len = g.cols();
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                }
                self.send(grads, x, self.like(x, d));
            }
            &Op::MeanRows(x) => {
                let (m, n) = self.value(x).dims2();
                let inv = T::one() / T::of(m as f64);
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.data().iter().map(|&v| v * inv));
                }
                self.send(grads, x, self.like(x, d));
            }
            &Op::Sum(x) => {
                let gv = g.item();
                let d = vec![gv; self.value(x).numel()];
                self.send(grads, x, self.like(x, d));
            }
            Op::L2NormalizeRows { x, norms } => {
                let (m, n) = y.dims2();
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for j in 0..n {
                        d[r * n + j] = (gr[j] - yr[j] * s) / norms[r];
                    }
                }
                self.send(grads, *x, self.like(*x, d));
            }
            &Op::Cosine { u, v, nu, nv } => {
                let gv = g.item();
                let c = y.item();
                let (tu, tv) = (self.value(u).data(), self.value(v).data());
                let k = T::one() / (nu * nv);
                if self.wants(u) {
                    let d = tu
                        .iter()
                        .zip(tv)
                        .map(|(&a, &b)| gv * (b * k - c * a / (nu * nu)))
                        .collect();
                    self.send(grads, u, self.like(u, d));
                }
                if self.wants(v) {
                    let d = tu
                        .iter()
                        .zip(tv)
                        .map(|(&a, &b)| gv * (a * k - c * b / (nv * nv)))
                        .collect();
                    self.send(grads, v, self.like(v, d));
                }
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let tl = self.value(*logits);
                let vocab = tl.cols();
                let k = g.item() / T::of(rows.len() as f64);
                let mut d = vec![T::zero(); tl.numel()];
                for (r, &(i, t)) in rows.iter().enumerate() {
                    let dr = &mut d[i * vocab..(i + 1) * vocab];
                    for (dv, &p) in dr.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *dv = k * p;
                    }
                    dr[t] -= k;
                }
                self.send(grads, *logits, self.like(*logits, d));
            }
        }
        Ok(())
    }
}

/// Softmax of `x` into `out`, subtracting the maximum first.
pub fn softmax_into<T: Element>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// GELU value and derivative.
#[inline]
fn gelu<T: Element>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}
