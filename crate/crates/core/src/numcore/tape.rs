//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse recording order, so the adjoint accumulation
//! order (and therefore the floating-point result) is fixed by the order in
//! which the forward pass was written.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::special::{digamma_unchecked, ln_gamma, trigamma_unchecked};
use super::sparse::{block_of_columns, CsrMatrix};
use super::tensor::{matmul_kernel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Recip(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Prelu(Var, Var),
    Elu(Var),
    Clamp(Var, f64, f64),
    Digamma(Var),
    LnGamma(Var),
    Sum(Var),
    RowSum(Var),
    RowNorm(Var),
    Softmax(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Broadcast(Var),
    AddRow(Var, Var),
    Propagate(Box<Propagate>),
}

#[derive(Clone, Debug)]
struct Propagate {
    adj: Arc<CsrMatrix>,
    mask: Option<Var>,
    input: Var,
    col_block: Vec<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    param: bool,
    needs_grad: bool,
}

/// Records tensor operations for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    non_finite: Option<(usize, &'static str)>,
}

/// Gradients of a scalar root with respect to every node that was a
/// trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; parameters unreachable from the root get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// `(parameter, gradient)` pairs in recording order.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.non_finite
    }

    /// Leaf node; trainable when the tensor was marked with `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let param = t.grad_enabled();
        self.push(t, Op::Leaf, param, "leaf")
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.requires_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, value: Tensor, op: Op, param: bool, name: &'static str) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((idx, name));
        }
        let needs_grad = param || self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param,
            needs_grad,
        });
        Var(idx)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Prelu(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Recip(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Elu(a)
            | Op::Clamp(a, _, _)
            | Op::Digamma(a)
            | Op::LnGamma(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::RowNorm(a)
            | Op::Softmax(a)
            | Op::Transpose(a)
            | Op::Broadcast(a) => vec![*a],
            Op::Propagate(p) => {
                let mut v = vec![p.input];
                v.extend(p.mask);
                v
            }
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, false, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), false, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), false, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), false, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), false, "div")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), "neg", |x| -x)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), "scale", |x| x * k)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddConst(a), "add_const", |x| x + k)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), "recip", |x| 1.0 / x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), "log", f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), "relu", |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Parametric ReLU with a single learnable slope shared by all entries.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Var {
        let s = self.scalar_value(slope);
        let out = self.value(a).map(|x| if x > 0.0 { x } else { s * x });
        self.push(out, Op::Prelu(a, slope), false, "prelu")
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), "elu", |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), "clamp", |x| x.clamp(lo, hi))
    }

    pub fn digamma(&mut self, a: Var) -> Var {
        self.unary(a, Op::Digamma(a), "digamma", |x| {
            if x > 0.0 {
                digamma_unchecked(x)
            } else {
                f64::NAN
            }
        })
    }

    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, Op::LnGamma(a), "ln_gamma", |x| {
            if x > 0.0 {
                ln_gamma(x)
            } else {
                f64::NAN
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), false, "sum")
    }

    /// `[n, d] -> [n, 1]` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let n = out.len();
        self.push(Tensor::matrix(n, 1, out), Op::RowSum(a), false, "row_sum")
    }

    /// `[n, d] -> [n, 1]` Euclidean row norms.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows())
            .map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let n = out.len();
        self.push(Tensor::matrix(n, 1, out), Op::RowNorm(a), false, "row_norm")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        out.set_requires_grad(false);
        for r in 0..t.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a), false, "softmax")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.cols(),
            tb.rows(),
            "matmul: {}x{} by {}x{}",
            ta.rows(),
            ta.cols(),
            tb.rows(),
            tb.cols()
        );
        let out = matmul_kernel(
            ta.data(),
            (ta.rows(), ta.cols()),
            false,
            tb.data(),
            (tb.rows(), tb.cols()),
            false,
        );
        self.push(out, Op::MatMul(a, b), false, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), false, "transpose")
    }

    /// Repeats a scalar over `shape`.
    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Var {
        assert!(self.value(s).is_scalar(), "broadcast source must be scalar");
        let out = Tensor::full(shape, self.scalar_value(s));
        self.push(out, Op::Broadcast(s), false, "broadcast")
    }

    /// `[n, d] + [1, d]` with the row added to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.len(), ta.cols(), "add_row: width mismatch");
        let mut out = ta.clone();
        out.set_requires_grad(false);
        let r = tr.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), false, "add_row")
    }

    /// Masked sparse propagation `out[:, j] = (A ⊙ M_β(j)) · input[:, j]`.
    ///
    /// `mask` has shape `[B, nnz]` (one mask over the stored entries of `adj`
    /// per column block), `blocks` partitions the columns of `input`. With no
    /// mask this is the plain product `A · input`.
    pub fn propagate(
        &mut self,
        adj: &Arc<CsrMatrix>,
        mask: Option<Var>,
        input: Var,
        blocks: &[Range<usize>],
    ) -> Var {
        let x = self.value(input);
        assert_eq!(x.rows(), adj.n(), "propagate: row count");
        let d = x.cols();
        assert_eq!(blocks.last().map_or(0, |b| b.end), d, "propagate: blocks");
        let col_block = block_of_columns(blocks);
        if let Some(m) = mask {
            assert_eq!(
                self.shape(m),
                &[blocks.len(), adj.nnz()],
                "propagate: mask shape"
            );
        }
        let mask_vals = mask.map(|m| self.value(m).data());
        let x = x.data();
        let vals = adj.values();
        let cols = adj.col_indices();
        let nnz = adj.nnz();
        let mut out = vec![0.0; adj.n() * d];
        for v in 0..adj.n() {
            let orow = &mut out[v * d..(v + 1) * d];
            for e in adj.row_range(v) {
                let xrow = &x[cols[e] * d..(cols[e] + 1) * d];
                match mask_vals {
                    Some(m) => {
                        for j in 0..d {
                            let w = vals[e] * m[col_block[j] * nnz + e];
                            orow[j] += w * xrow[j];
                        }
                    }
                    None => {
                        for j in 0..d {
                            let w = vals[e];
                            orow[j] += w * xrow[j];
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(adj.n(), d, out);
        let op = Op::Propagate(Box::new(Propagate {
            adj: Arc::clone(adj),
            mask,
            input,
            col_block,
        }));
        self.push(out, op, false, "propagate")
    }

    /// Reverse pass from a scalar root. Consumes the tape's single backward.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        if let Some((node, op)) = self.non_finite {
            return Err(Error::NonFinite { op, node });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        let mut result: Vec<Option<Tensor>> = vec![None; n];
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        adj[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.param {
                result[i] = Some(g.clone());
            }
            self.backprop_node(i, &g, &mut adj);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.param && result[i].is_none() {
                result[i] = Some(Tensor::zeros(&shapes[i]));
            }
        }
        Ok(Gradients {
            grads: result,
            shapes,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Tensor| accumulate(adj, v, delta);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |g, y| g * y));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if wants(*a) {
                    acc(*a, g.zip_map(vb, |g, y| g / y));
                }
                if wants(*b) {
                    let ga = g.zip_map(out, |g, o| g * o);
                    acc(*b, ga.zip_map(vb, |t, y| -t / y));
                }
            }
            Op::Neg(a) => acc(*a, g.map(|x| -x)),
            Op::Scale(a, k) => {
                let k = *k;
                acc(*a, g.map(|x| x * k))
            }
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Recip(a) => acc(*a, g.zip_map(out, |g, o| -g * o * o)),
            Op::Exp(a) => acc(*a, g.zip_map(out, |g, o| g * o)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |g, x| g / x)),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |g, o| g * o * (1.0 - o))),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Prelu(a, s) => {
                let x = self.value(*a);
                let slope = self.scalar_value(*s);
                if wants(*a) {
                    acc(*a, g.zip_map(x, |g, x| if x > 0.0 { g } else { slope * g }));
                }
                if wants(*s) {
                    let gs: f64 = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > 0.0 { 0.0 } else { g * x })
                        .sum();
                    acc(*s, Tensor::full(self.shape(*s), gs));
                }
            }
            Op::Elu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { g * x.exp() }),
            ),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    g.zip_map(self.value(*a), |g, x| if x > lo && x < hi { g } else { 0.0 }),
                )
            }
            Op::Digamma(a) => acc(
                *a,
                g.zip_map(self.value(*a), |g, x| g * trigamma_unchecked(x)),
            ),
            Op::LnGamma(a) => acc(
                *a,
                g.zip_map(self.value(*a), |g, x| g * digamma_unchecked(x)),
            ),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::RowSum(a) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let gr = g.data()[r];
                    d.row_mut(r).iter_mut().for_each(|v| *v = gr);
                }
                acc(*a, d)
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let norm = out.data()[r];
                    if norm > 0.0 {
                        let k = g.data()[r] / norm;
                        for (dv, xv) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                            *dv = k * xv;
                        }
                    }
                }
                acc(*a, d)
            }
            Op::Softmax(a) => {
                let mut d = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (gr, orow) = (g.row(r), out.row(r));
                    let dot: f64 = gr.iter().zip(orow).map(|(g, o)| g * o).sum();
                    for ((dv, gv), ov) in d.row_mut(r).iter_mut().zip(gr).zip(orow) {
                        *dv = ov * (gv - dot);
                    }
                }
                acc(*a, d)
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let gs = (g.rows(), g.cols());
                if wants(*a) {
                    let d = matmul_kernel(g.data(), gs, false, tb.data(), (tb.rows(), tb.cols()), true);
                    acc(*a, reshape_like(d, ta));
                }
                if wants(*b) {
                    let d = matmul_kernel(ta.data(), (ta.rows(), ta.cols()), true, g.data(), gs, false);
                    acc(*b, reshape_like(d, tb));
                }
            }
            Op::Transpose(a) => {
                let d = g.transpose();
                acc(*a, reshape_like(d, self.value(*a)))
            }
            Op::Broadcast(s) => acc(*s, Tensor::full(self.shape(*s), g.sum())),
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*row) {
                    let mut d = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (dv, gv) in d.iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    let shape = self.shape(*row).to_vec();
                    acc(*row, Tensor::new(shape, d).expect("row gradient shape"));
                }
            }
            Op::Propagate(p) => self.backprop_propagate(p, g, adj),
        }
    }

    fn backprop_propagate(&self, p: &Propagate, g: &Tensor, adj_grads: &mut [Option<Tensor>]) {
        let a = &p.adj;
        let x = self.value(p.input);
        let d = x.cols();
        let nnz = a.nnz();
        let vals = a.values();
        let cols = a.col_indices();
        let rows = a.row_indices();
        let mask_vals = p.mask.map(|m| self.value(m).data());
        let gd = g.data();
        let xd = x.data();

        if self.nodes[p.input.0].needs_grad {
            let mut gx = vec![0.0; a.n() * d];
            for e in 0..nnz {
                let (v, u) = (rows[e], cols[e]);
                let grow = &gd[v * d..(v + 1) * d];
                let xrow = &mut gx[u * d..(u + 1) * d];
                for j in 0..d {
                    let w = match mask_vals {
                        Some(m) => vals[e] * m[p.col_block[j] * nnz + e],
                        None => vals[e],
                    };
                    xrow[j] += w * grow[j];
                }
            }
            accumulate(adj_grads, p.input, Tensor::matrix(a.n(), d, gx));
        }
        if let Some(m) = p.mask {
            if self.nodes[m.0].needs_grad {
                let n_blocks = self.shape(m)[0];
                let mut gm = vec![0.0; n_blocks * nnz];
                for e in 0..nnz {
                    let (v, u) = (rows[e], cols[e]);
                    let grow = &gd[v * d..(v + 1) * d];
                    let xrow = &xd[u * d..(u + 1) * d];
                    for j in 0..d {
                        gm[p.col_block[j] * nnz + e] += vals[e] * grow[j] * xrow[j];
                    }
                }
                accumulate(adj_grads, m, Tensor::matrix(n_blocks, nnz, gm));
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    if t.shape() == like.shape() {
        t
    } else {
        Tensor::new(like.shape().to_vec(), t.into_data()).expect("same element count")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
