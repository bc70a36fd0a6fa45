use std::any::Any;
use std::fmt;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{log_sum_exp, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Opaque per-invocation state a [`CustomOp`] keeps from forward to backward.
pub type OpCache = Box<dyn Any + Send + Sync>;

/// Fused operation with a hand-written backward pass.
///
/// Used for composite kernels (circuit evaluation) where recording every
/// scalar primitive would be prohibitively slow.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> (Tensor, OpCache);

    /// Returns one gradient per input; `None` where `needs_grad[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        cache: &OpCache,
        grad_out: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulCol(Var, Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Relu(Var),
    Tanh(Var),
    MatMul(Var, Var),
    LogSoftmaxRows(Var),
    LogSoftmaxSegments(Var, Arc<[usize]>),
    SoftmaxRows(Var),
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Nll(Var, Arc<[usize]>),
    NormalizeRows(Var),
    Custom(Arc<dyn CustomOp>, Vec<Var>, OpCache),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Every operation validates shapes eagerly and panics on mismatch; shape
/// errors on the tape are programming errors, not data errors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every recorded value after [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss (or was recorded without `requires_grad`).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (readable through [`Gradients::get`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records the current value of a parameter. Its gradient is accumulated
    /// into the store on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add: shape mismatch");
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "add_row: bias must be a row vector");
        assert_eq!(x.cols(), r.cols(), "add_row: width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Multiplies row `i` of `a` by the scalar `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.cols(), 1, "mul_col: scale must be a column");
        assert_eq!(x.rows(), c.rows(), "mul_col: row mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            let s = c.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            segment_log_softmax(out.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Log-softmax over consecutive column segments of every row.
    pub fn log_softmax_segments(&mut self, a: Var, segments: Arc<[usize]>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(
            segments.iter().sum::<usize>(),
            out.cols(),
            "log_softmax_segments: segments do not cover the row"
        );
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mut start = 0;
            for &len in segments.iter() {
                segment_log_softmax(&mut row[start..start + len]);
                start += len;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxSegments(a, segments), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            segment_log_softmax(row);
            row.iter_mut().for_each(|x| *x = x.exp());
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row sums as a column: `B x N -> B x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
        let out = Tensor::from_vec(x.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(!x.is_empty(), "mean_all of an empty tensor");
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::MeanAll(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let x = self.value(p);
                assert_eq!(x.rows(), rows, "concat_cols: row mismatch");
                data.extend_from_slice(x.row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(x.rows() * len);
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let out = Tensor::from_vec(x.rows(), len, data);
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    /// Mean negative log-likelihood `-(1/B) sum_i logp[i, labels[i]]`.
    pub fn nll(&mut self, log_probs: Var, labels: Arc<[usize]>) -> Var {
        let x = self.value(log_probs);
        assert_eq!(x.rows(), labels.len(), "nll: label count mismatch");
        assert!(!labels.is_empty(), "nll: empty batch");
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -x.get(i, y))
            .sum();
        let out = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(log_probs);
        self.push(out, Op::Nll(log_probs, labels), rg)
    }

    /// Divides each row of a nonnegative matrix by its sum; rows summing to
    /// zero become uniform (and carry no gradient).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            } else {
                row.iter_mut().for_each(|x| *x = 1.0 / cols as f64);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::NormalizeRows(a), rg)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Var {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let (out, cache) = op.forward(&values);
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(out, Op::Custom(op, inputs.to_vec(), cache), rg)
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store`; parameters that do not influence the loss are left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients, AutodiffError> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or(AutodiffError::UnknownVar(loss.0))?;
        if node.value.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(node.value.shape()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backprop_node(node, &g, &mut adj);
            if let Op::Param(id) = node.op {
                store.grad_mut(id).add_assign(&g);
            }
            adj[idx] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accum(adj, *a, || g.clone());
                self.accum(adj, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(adj, *a, || g.clone());
                self.accum(adj, *b, || g.map(|x| -x));
            }
            Op::AddRow(a, row) => {
                self.accum(adj, *a, || g.clone());
                self.accum(adj, *row, || {
                    let mut r = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    r
                });
            }
            Op::Scale(a, c) => self.accum(adj, *a, || g.map(|x| x * c)),
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                self.accum(adj, *a, || zip_map(g, y, |g, y| g * y));
                self.accum(adj, *b, || zip_map(g, x, |g, x| g * x));
            }
            Op::MulCol(a, col) => {
                let (x, c) = (self.value(*a), self.value(*col));
                self.accum(adj, *a, || {
                    let mut r = g.clone();
                    for i in 0..r.rows() {
                        let s = c.get(i, 0);
                        r.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    r
                });
                self.accum(adj, *col, || {
                    let data = (0..g.rows())
                        .map(|i| g.row(i).iter().zip(x.row(i)).map(|(g, x)| g * x).sum())
                        .collect();
                    Tensor::from_vec(g.rows(), 1, data)
                });
            }
            Op::Exp(a) => self.accum(adj, *a, || zip_map(g, out, |g, e| g * e)),
            Op::Log(a) => {
                let x = self.value(*a);
                self.accum(adj, *a, || zip_map(g, x, |g, x| g / x));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                self.accum(adj, *a, || {
                    zip_map(g, x, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 })
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accum(adj, *a, || zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Tanh(a) => self.accum(adj, *a, || zip_map(g, out, |g, t| g * (1.0 - t * t))),
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                self.accum(adj, *a, || g.matmul_t(y));
                self.accum(adj, *b, || x.t_matmul(g));
            }
            Op::LogSoftmaxRows(a) => {
                self.accum(adj, *a, || {
                    let mut r = g.clone();
                    for i in 0..r.rows() {
                        log_softmax_backward(r.row_mut(i), out.row(i));
                    }
                    r
                });
            }
            Op::LogSoftmaxSegments(a, segments) => {
                self.accum(adj, *a, || {
                    let mut r = g.clone();
                    for i in 0..r.rows() {
                        let (gr, orow) = (r.row_mut(i), out.row(i));
                        let mut start = 0;
                        for &len in segments.iter() {
                            let end = start + len;
                            log_softmax_backward(&mut gr[start..end], &orow[start..end]);
                            start = end;
                        }
                    }
                    r
                });
            }
            Op::SoftmaxRows(a) => {
                self.accum(adj, *a, || {
                    let mut r = g.clone();
                    for i in 0..r.rows() {
                        let orow = out.row(i);
                        let dot: f64 = r.row(i).iter().zip(orow).map(|(g, p)| g * p).sum();
                        for (v, p) in r.row_mut(i).iter_mut().zip(orow) {
                            *v = p * (*v - dot);
                        }
                    }
                    r
                });
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                self.accum(adj, *a, || {
                    let mut r = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        r.row_mut(i).fill(g.get(i, 0));
                    }
                    r
                });
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                self.accum(adj, *a, || Tensor::filled(x.rows(), x.cols(), g.item()));
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let s = g.item() / x.len() as f64;
                self.accum(adj, *a, || Tensor::filled(x.rows(), x.cols(), s));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accum(adj, p, || {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row(i)[start..start + w]);
                        }
                        Tensor::from_vec(g.rows(), w, data)
                    });
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                self.accum(adj, *a, || {
                    let mut r = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        r.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    r
                });
            }
            Op::Nll(a, labels) => {
                let x = self.value(*a);
                let s = -g.item() / labels.len() as f64;
                self.accum(adj, *a, || {
                    let mut r = Tensor::zeros(x.rows(), x.cols());
                    for (i, &y) in labels.iter().enumerate() {
                        r.set(i, y, s);
                    }
                    r
                });
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                self.accum(adj, *a, || {
                    let mut r = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let s: f64 = x.row(i).iter().sum();
                        if s > 0.0 {
                            let grow = g.row(i);
                            let dot: f64 = grow.iter().zip(out.row(i)).map(|(g, o)| g * o).sum();
                            for (v, gv) in r.row_mut(i).iter_mut().zip(grow) {
                                *v = (gv - dot) / s;
                            }
                        }
                    }
                    r
                });
            }
            Op::Custom(op, inputs, cache) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let grads = op.backward(&values, out, cache, g, &needs);
                for (&v, grad) in inputs.iter().zip(grads) {
                    if let Some(grad) = grad {
                        self.accum(adj, v, || grad);
                    }
                }
            }
        }
    }

    fn accum(&self, adj: &mut [Option<Tensor>], v: Var, grad: impl FnOnce() -> Tensor) {
        if !self.rg(v) {
            return;
        }
        let grad = grad();
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn segment_log_softmax(xs: &mut [f64]) {
    let lse = log_sum_exp(xs);
    if lse.is_finite() {
        xs.iter_mut().for_each(|x| *x -= lse);
    }
}

/// In place: `g <- g - softmax * sum(g)` given the log-softmax output.
fn log_softmax_backward(g: &mut [f64], log_out: &[f64]) {
    let total: f64 = g.iter().sum();
    for (v, &lo) in g.iter_mut().zip(log_out) {
        *v -= lo.exp() * total;
    }
}
