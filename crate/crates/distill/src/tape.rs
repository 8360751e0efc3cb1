//! A reverse-mode differentiation tape over matrices.
//!
//! Every op appends a node holding its value and whatever it needs for the
//! backward pass. Values are checked for finiteness as they are produced, so
//! a blow-up is reported with the name of the op that caused it.

use anatomy_core::{AnatomyError, Exec, Result};

use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A run of consecutive rows that attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    Gather { table: Var, ids: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    DivRows(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, probs: Vec<T> },
    SelectRows { x: Var, rows: Vec<usize> },
    RowDot(Var, Var),
    RowSumSq(Var),
    RowNorm(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Gather { .. } => "gather",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::DivRows(..) => "div_rows",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Attention { .. } => "attention",
            Op::SelectRows { .. } => "select_rows",
            Op::RowDot(..) => "row_dot",
            Op::RowSumSq(..) => "row_sum_sq",
            Op::RowNorm(..) => "row_norm",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    exec: Exec,
}

/// Gradients indexed by [`Var`]; absent for nodes that do not reach a
/// trainable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn shape_error(op: &str, a: (usize, usize), b: (usize, usize)) -> AnatomyError {
    AnatomyError::Validation(format!("{op}: incompatible shapes {}x{} and {}x{}", a.0, a.1, b.0, b.1))
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation and its derivative
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * c * (one + T::of(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new(exec: Exec) -> Self {
        Tape { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AnatomyError::Numeric {
                op: op.name(),
                message: format!("non-finite value in a {}x{} result", value.rows, value.cols),
            });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows) {
            return Err(AnatomyError::Validation(format!(
                "gather: index {bad} out of range for {} rows",
                t.rows
            )));
        }
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.needs(table);
        self.push(out, Op::Gather { table, ids }, ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_error(name, self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "div", |p, q| p / q, Op::Div(a, b))
    }

    /// Row `i` of `x` divided by entry `i` of the `n x 1` column `d`.
    pub fn div_rows(&mut self, x: Var, d: Var) -> Result<Var> {
        let (xs, ds) = (self.shape(x), self.shape(d));
        if ds != (xs.0, 1) {
            return Err(shape_error("div_rows", xs, ds));
        }
        let mut out = self.value(x).clone();
        let dv = &self.value(d).data;
        for (row, &q) in out.data.chunks_exact_mut(xs.1.max(1)).zip(dv) {
            for o in row.iter_mut() {
                *o /= q;
            }
        }
        let ng = self.needs(x) || self.needs(d);
        self.push(out, Op::DivRows(x, d), ng)
    }

    /// `x` plus the `1 x cols` row `bias` on every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs != (1, xs.1) {
            return Err(shape_error("add_row", xs, bs));
        }
        let mut out = self.value(x).clone();
        let b = &self.value(bias).data;
        for row in out.data.chunks_exact_mut(xs.1.max(1)) {
            for (o, &v) in row.iter_mut().zip(b) {
                *o += v;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&v| v * c).collect());
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&v| v + c).collect());
        let ng = self.needs(x);
        self.push(out, Op::Offset(x), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(shape_error("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul(self.value(a), self.value(b), self.exec);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Row-wise layer normalization with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(shape_error("layer_norm", (n, d), self.shape(gain)));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let xv = self.value(x);
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out.data[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&v| gelu_parts(v).0).collect());
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Multi-head scaled dot-product self-attention where rows only attend
    /// within their own segment. `q`, `k` and `v` are already projected.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize) -> Result<Var> {
        let (n, w) = self.shape(q);
        if self.shape(k) != (n, w) || self.shape(v) != (n, w) {
            return Err(shape_error("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || w % heads != 0 {
            return Err(AnatomyError::Validation(format!("attention: width {w} not divisible by {heads} heads")));
        }
        if segments.iter().any(|s| s.len == 0 || s.start + s.len > n) {
            return Err(AnatomyError::Validation("attention: segment out of range".into()));
        }
        let dh = w / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(n, w);
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.len * heads).sum());
        let mut scores = Vec::new();
        for s in &segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in s.start..s.start + s.len {
                    let qi = &qv.row(i)[cols.clone()];
                    scores.clear();
                    scores.extend((s.start..s.start + s.len).map(|j| dot(qi, &kv.row(j)[cols.clone()]) * scale));
                    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        total += *sc;
                    }
                    let orow = &mut out.data[i * w + h * dh..i * w + (h + 1) * dh];
                    for (jj, sc) in scores.iter().enumerate() {
                        let p = *sc / total;
                        probs.push(p);
                        let vrow = &vv.row(s.start + jj)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, segments, heads, probs }, ng)
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows) {
            return Err(AnatomyError::Validation(format!("select_rows: row {bad} out of range")));
        }
        let mut out = Tensor::zeros(rows.len(), t.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        let ng = self.needs(x);
        self.push(out, Op::SelectRows { x, rows }, ng)
    }

    /// Per-row dot product, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_error("row_dot", self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = (0..x.rows).map(|i| dot(x.row(i), y.row(i))).collect();
        let out = Tensor::from_vec(x.rows, 1, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::RowDot(a, b), ng)
    }

    /// Per-row squared norm, `n x 1`.
    pub fn row_sum_sq(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = (0..t.rows).map(|i| dot(t.row(i), t.row(i))).collect();
        let out = Tensor::from_vec(t.rows, 1, data);
        let ng = self.needs(x);
        self.push(out, Op::RowSumSq(x), ng)
    }

    /// Per-row Euclidean norm, `n x 1`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = (0..t.rows).map(|i| dot(t.row(i), t.row(i)).sqrt()).collect();
        let out = Tensor::from_vec(t.rows, 1, data);
        let ng = self.needs(x);
        self.push(out, Op::RowNorm(x), ng)
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(AnatomyError::Validation("mean of an empty tensor".into()));
        }
        let m = t.data.iter().copied().sum::<T>() / T::of(t.len() as f64);
        let ng = self.needs(x);
        self.push(Tensor::from_vec(1, 1, vec![m]), Op::Mean(x), ng)
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_error("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(AnatomyError::Numeric {
                    op: node.op.name(),
                    message: "non-finite gradient".into(),
                });
            }
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let map = |t: &Tensor<T>, f: &dyn Fn(usize, T) -> T| {
            Tensor::from_vec(t.rows, t.cols, t.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, &|_, v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                acc(*a, map(g, &|i, v| v * y.data[i]));
                acc(*b, map(g, &|i, v| v * x.data[i]));
            }
            Op::Div(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                acc(*a, map(g, &|i, v| v / y.data[i]));
                acc(*b, map(g, &|i, v| -v * x.data[i] / (y.data[i] * y.data[i])));
            }
            Op::DivRows(x, d) => {
                let (xv, dv) = (self.value(*x), self.value(*d));
                let cols = xv.cols;
                acc(*x, map(g, &|i, v| v / dv.data[i / cols]));
                let mut dd = Tensor::zeros(dv.rows, 1);
                for i in 0..dv.rows {
                    let q = dv.data[i];
                    dd.data[i] = -dot(g.row(i), xv.row(i)) / (q * q);
                }
                acc(*d, dd);
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                let mut d = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    for (o, &v) in d.data.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*bias, d);
            }
            Op::Scale(x, c) => acc(*x, map(g, &|_, v| v * *c)),
            Op::Offset(x) => acc(*x, g.clone()),
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, matmul_nt(g, self.value(*b), self.exec));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(self.value(*a), g, self.exec));
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (n, d) = g.shape();
                let gv = &self.value(*gain).data;
                let inv_d = T::one() / T::of(d as f64);
                let mut dx = Tensor::zeros(n, d);
                let mut dg = Tensor::zeros(1, d);
                let mut db = Tensor::zeros(1, d);
                for i in 0..n {
                    let gr = g.row(i);
                    let hr = &xhat[i * d..(i + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dg.data[j] += gr[j] * hr[j];
                        db.data[j] += gr[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx.data[i * d + j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, map(g, &|i, v| v * gelu_parts(xv.data[i]).1));
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, segments, *heads, probs, g);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::SelectRows { x, rows } => {
                let t = self.value(*x);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*x, d);
            }
            Op::RowDot(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let cols = x.cols;
                acc(*a, map(y, &|i, v| v * g.data[i / cols]));
                acc(*b, map(x, &|i, v| v * g.data[i / cols]));
            }
            Op::RowSumSq(x) => {
                let t = self.value(*x);
                let cols = t.cols;
                acc(*x, map(t, &|i, v| T::of(2.0) * v * g.data[i / cols]));
            }
            Op::RowNorm(x) => {
                let t = self.value(*x);
                let norms = &node.value.data;
                let cols = t.cols;
                acc(*x, map(t, &|i, v| v / norms[i / cols] * g.data[i / cols]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let share = g.scalar() / T::of(t.len() as f64);
                acc(*x, Tensor::filled(t.rows, t.cols, share));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, w) = qv.shape();
        let dh = w / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Tensor::zeros(n, w);
        let mut dk = Tensor::zeros(n, w);
        let mut dv = Tensor::zeros(n, w);
        let mut offset = 0;
        let mut dp = Vec::new();
        for s in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in s.start..s.start + s.len {
                    let p = &probs[offset..offset + s.len];
                    offset += s.len;
                    let gi = &g.row(i)[c0..c0 + dh];
                    dp.clear();
                    for (jj, &pj) in p.iter().enumerate() {
                        let j = s.start + jj;
                        dp.push(dot(gi, &vv.row(j)[c0..c0 + dh]));
                        for (o, &x) in dv.data[j * w + c0..j * w + c0 + dh].iter_mut().zip(gi) {
                            *o += pj * x;
                        }
                    }
                    let inner = dot(p, &dp);
                    for (jj, &pj) in p.iter().enumerate() {
                        let j = s.start + jj;
                        let ds = pj * (dp[jj] - inner) * scale;
                        let krow = &kv.row(j)[c0..c0 + dh];
                        for (o, &x) in dq.data[i * w + c0..i * w + c0 + dh].iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let qrow = &qv.row(i)[c0..c0 + dh];
                        for (o, &x) in dk.data[j * w + c0..j * w + c0 + dh].iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}
