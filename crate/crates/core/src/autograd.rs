//! Tape-based reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] is an append-only list of nodes. Each op pushes one node and
//! returns a [`Var`] handle to it; node ids are therefore already in
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each node once and accumulates gradients additively across fan-out.
//!
//! Graphs are cheap and meant to be rebuilt for every training step: the rank
//! selected by a gate changes which slices of the adapter are live, so the
//! topology depends on the data.
//!
//! Every op checks its output for NaN/Inf and returns
//! [`Error::NonFinite`] instead of silently propagating it.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Floor applied before `ln` so that `log(0)` stays finite.
pub const LOG_FLOOR: f64 = 1e-300;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, keeping columns (`n×m -> 1×m`).
    Rows,
    /// Reduce over columns, keeping rows (`n×m -> n×1`).
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulRow(Var, Var),
    AddRow(Var, Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    StopGradient,
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, Axis),
    CosineSim(Var, Var),
    LayerNorm(Var),
    Gelu(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) root wrt `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op: &'static str, kind: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: kind,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), out, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", Op::Transpose(a), out, &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), out, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), out, &[a, b])
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", Op::Scale(a, c), out, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Multiply every entry of `a` by the single entry of the `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", self.value(a).shape(), self.value(s).shape()));
        }
        let k = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * k);
        self.push("mul_scalar", Op::MulScalar(a, s), out, &[a, s])
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (_, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(shape_err(op, self.value(a).shape(), self.value(row).shape()));
        }
        Ok(())
    }

    /// Multiply each row of `a` (`n×m`) elementwise by `row` (`1×m`).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let (_, c) = self.shape(a);
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= r[i % c];
        }
        self.push("mul_row", Op::MulRow(a, row), out, &[a, row])
    }

    /// Add `row` (`1×m`) to each row of `a` (`n×m`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let (_, c) = self.shape(a);
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += r[i % c];
        }
        self.push("add_row", Op::AddRow(a, row), out, &[a, row])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", Op::Exp(a), out, &[a])
    }

    /// Natural log with inputs clamped to [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.push("log", Op::Log(a), out, &[a])
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(())
    }

    /// Row-wise `softmax(v / temperature)` with max subtraction.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let out = softmax_rows(self.value(a), temperature);
        self.push("softmax", Op::Softmax(a, temperature), out, &[a])
    }

    /// Row-wise `log softmax(v / temperature)`.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|&v| ((v - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            out.extend(row.iter().map(|&v| (v - max) / temperature - lse));
        }
        let out = Tensor::from_parts(r, c, out);
        self.push("log_softmax", Op::LogSoftmax(a, temperature), out, &[a])
    }

    /// Rows `start..start+len`.
    pub fn row_range(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(Error::OutOfRange {
                what: "rows",
                index: start + len,
                len: r,
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_parts(len, c, data);
        self.push("row_range", Op::SliceRows { src: a, start }, out, &[a])
    }

    /// Columns `start..start+len`.
    pub fn col_range(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::OutOfRange {
                what: "columns",
                index: start + len,
                len: c,
            });
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row_slice(i)[start..start + len]);
        }
        let out = Tensor::from_parts(r, len, data);
        self.push("col_range", Op::SliceCols { src: a, start }, out, &[a])
    }

    /// First `k` rows.
    pub fn slice_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        self.row_range(a, 0, k)
    }

    /// First `k` columns.
    pub fn slice_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        self.col_range(a, 0, k)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows input"))?;
        let (_, c) = self.shape(first);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(shape_err("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(rows, c, data);
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), out, parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols input"))?;
        let (r, _) = self.shape(first);
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(shape_err("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            cols += pc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::from_parts(r, cols, data);
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), out, parts)
    }

    /// Rows picked by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::OutOfRange {
                    what: "rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(self.value(a).row_slice(i));
        }
        if rows.is_empty() {
            return Err(Error::Empty("row selection"));
        }
        let out = Tensor::from_parts(rows.len(), c, data);
        self.push("select_rows", Op::SelectRows(a, rows.to_vec()), out, &[a])
    }

    /// One entry per row: `out[i] = a[i, cols[i]]`, shaped `n×1`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if cols.len() != r {
            return Err(Error::InvalidArgument(format!(
                "gather needs one index per row ({r}), got {}",
                cols.len()
            )));
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::OutOfRange {
                    what: "columns",
                    index: j,
                    len: c,
                });
            }
            data.push(self.value(a).get(i, j));
        }
        let out = Tensor::from_parts(r, 1, data);
        self.push("gather", Op::Gather(a, cols.to_vec()), out, &[a])
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).clone();
        self.nodes.push(Node {
            op: Op::StopGradient,
            value: out,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", Op::Sum(a), out, &[a])
    }

    /// Mean of all entries, `1×1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.push("mean", Op::Mean(a), out, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, v) in acc.iter_mut().zip(x.row_slice(i)) {
                        *s += v;
                    }
                }
                Tensor::from_parts(1, c, acc.into_iter().map(|s| s / r as f64).collect())
            }
            Axis::Cols => Tensor::from_parts(
                r,
                1,
                (0..r).map(|i| x.row_slice(i).iter().sum::<f64>() / c as f64).collect(),
            ),
        };
        self.push("mean_axis", Op::MeanAxis(a, axis), out, &[a])
    }

    /// Pairwise cosine similarity between rows: `a (n×h)`, `b (t×h)` → `n×t`.
    /// Any zero-norm row is an error.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.cols() != xb.cols() {
            return Err(shape_err("cosine_similarity", xa.shape(), xb.shape()));
        }
        let na = row_norms(xa);
        let nb = row_norms(xb);
        if na.iter().chain(&nb).any(|&n| n == 0.0) {
            return Err(Error::ZeroNorm("cosine_similarity"));
        }
        let mut out = xa.matmul_t(xb)?;
        let t = xb.rows();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            *v /= na[idx / t] * nb[idx % t];
        }
        self.push("cosine_similarity", Op::CosineSim(a, b), out, &[a, b])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row_slice(i);
            let (mu, inv) = norm_stats(row);
            out.extend(row.iter().map(|&v| (v - mu) * inv));
        }
        let out = Tensor::from_parts(r, c, out);
        self.push("layer_norm", Op::LayerNorm(a), out, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_K * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push("gelu", Op::Gelu(a), out, &[a])
    }

    /// Reverse sweep from a `1×1` root. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(
                "backward root must be a 1x1 scalar".into(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_t(val(*b))?)?;
                }
                if needs(*b) {
                    acc(*b, val(*a).t_matmul(g)?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*b) {
                    acc(*b, g.map(|x| -x))?;
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y)?)?;
                }
                if needs(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c))?,
            Op::MulScalar(a, s) => {
                let k = val(*s).data()[0];
                if needs(*a) {
                    acc(*a, g.map(|x| x * k))?;
                }
                if needs(*s) {
                    let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Tensor::scalar(d))?;
                }
            }
            Op::MulRow(a, row) => {
                let c = g.cols();
                if needs(*a) {
                    let r = val(*row).data();
                    let mut t = g.clone();
                    for (i, x) in t.data_mut().iter_mut().enumerate() {
                        *x *= r[i % c];
                    }
                    acc(*a, t)?;
                }
                if needs(*row) {
                    let mut d = vec![0.0; c];
                    for (i, (x, y)) in g.data().iter().zip(val(*a).data()).enumerate() {
                        d[i % c] += x * y;
                    }
                    acc(*row, Tensor::from_parts(1, c, d))?;
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*row) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for (i, x) in g.data().iter().enumerate() {
                        d[i % c] += x;
                    }
                    acc(*row, Tensor::from_parts(1, c, d))?;
                }
            }
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)?)?,
            Op::Log(a) => acc(
                *a,
                g.zip_map(val(*a), |x, y| if y > LOG_FLOOR { x / y } else { 0.0 })?,
            )?,
            Op::Softmax(a, temp) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    d.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot) / temp));
                }
                acc(*a, Tensor::from_parts(r, c, d))?;
            }
            Op::LogSoftmax(a, temp) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let total: f64 = gr.iter().sum();
                    d.extend(yr.iter().zip(gr).map(|(l, q)| (q - l.exp() * total) / temp));
                }
                acc(*a, Tensor::from_parts(r, c, d))?;
            }
            Op::SliceRows { src, start } => {
                let x = val(*src);
                let c = x.cols();
                let mut t = Tensor::zeros(x.rows(), c);
                t.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*src, t)?;
            }
            Op::SliceCols { src, start } => {
                let x = val(*src);
                let (r, c) = (x.rows(), x.cols());
                let k = g.cols();
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    t.data_mut()[i * c + start..i * c + start + k].copy_from_slice(g.row_slice(i));
                }
                acc(*src, t)?;
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if needs(p) {
                        let r = n / c;
                        acc(p, Tensor::from_parts(r, c, g.data()[offset..offset + n].to_vec()))?;
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            d.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                        }
                        acc(p, Tensor::from_parts(r, pc, d))?;
                    }
                    offset += pc;
                }
            }
            Op::SelectRows(a, rows) => {
                let x = val(*a);
                let c = x.cols();
                let mut t = Tensor::zeros(x.rows(), c);
                for (k, &i) in rows.iter().enumerate() {
                    for (dst, src) in t.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(k)) {
                        *dst += src;
                    }
                }
                acc(*a, t)?;
            }
            Op::Gather(a, cols) => {
                let x = val(*a);
                let mut t = Tensor::zeros(x.rows(), x.cols());
                for (i, &j) in cols.iter().enumerate() {
                    t.set(i, j, g.data()[i]);
                }
                acc(*a, t)?;
            }
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, Tensor::filled(x.rows(), x.cols(), g.data()[0]))?;
            }
            Op::Mean(a) => {
                let x = val(*a);
                let v = g.data()[0] / x.len() as f64;
                acc(*a, Tensor::filled(x.rows(), x.cols(), v))?;
            }
            Op::MeanAxis(a, axis) => {
                let x = val(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = match axis {
                            Axis::Rows => g.data()[j] / r as f64,
                            Axis::Cols => g.data()[i] / c as f64,
                        };
                        t.set(i, j, v);
                    }
                }
                acc(*a, t)?;
            }
            Op::CosineSim(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let s = &node.value;
                let (n, t, h) = (xa.rows(), xb.rows(), xa.cols());
                let na = row_norms(xa);
                let nb = row_norms(xb);
                #[allow(clippy::needless_range_loop)]
                if needs(*a) {
                    let mut d = vec![0.0; n * h];
                    for i in 0..n {
                        for j in 0..t {
                            let gs = g.get(i, j);
                            if gs == 0.0 {
                                continue;
                            }
                            let (hi, ej) = (xa.row_slice(i), xb.row_slice(j));
                            let inv = 1.0 / (na[i] * nb[j]);
                            let self_term = s.get(i, j) / (na[i] * na[i]);
                            for k in 0..h {
                                d[i * h + k] += gs * (ej[k] * inv - self_term * hi[k]);
                            }
                        }
                    }
                    acc(*a, Tensor::from_parts(n, h, d))?;
                }
                #[allow(clippy::needless_range_loop)]
                if needs(*b) {
                    let mut d = vec![0.0; t * h];
                    for i in 0..n {
                        for j in 0..t {
                            let gs = g.get(i, j);
                            if gs == 0.0 {
                                continue;
                            }
                            let (hi, ej) = (xa.row_slice(i), xb.row_slice(j));
                            let inv = 1.0 / (na[i] * nb[j]);
                            let self_term = s.get(i, j) / (nb[j] * nb[j]);
                            for k in 0..h {
                                d[j * h + k] += gs * (hi[k] * inv - self_term * ej[k]);
                            }
                        }
                    }
                    acc(*b, Tensor::from_parts(t, h, d))?;
                }
            }
            Op::LayerNorm(a) => {
                let x = val(*a);
                let y = &node.value;
                let (r, c) = (x.rows(), x.cols());
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (_, inv) = norm_stats(x.row_slice(i));
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| inv * (gv - mean_g - yv * mean_gy)));
                }
                acc(*a, Tensor::from_parts(r, c, d))?;
            }
            Op::Gelu(a) => {
                let d = g.zip_map(val(*a), |gv, x| {
                    let u = GELU_C * (x + GELU_K * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                })?;
                acc(*a, d)?;
            }
        }
        Ok(())
    }
}

/// `1×n` one-hot row. Not differentiable; insert with [`Graph::constant`].
pub fn one_hot(index: usize, len: usize) -> Result<Tensor> {
    if index >= len {
        return Err(Error::OutOfRange {
            what: "one_hot",
            index,
            len,
        });
    }
    let mut t = Tensor::zeros(1, len);
    t.data_mut()[index] = 1.0;
    Ok(t)
}

/// Row-wise softmax of a plain tensor (no graph).
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row_slice(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| ((v - max) / temperature).exp()));
        let z: f64 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    Tensor::from_parts(r, c, out)
}

fn row_norms(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn norm_stats(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mu = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c;
    (mu, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}
