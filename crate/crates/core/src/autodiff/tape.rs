use std::sync::Arc;

use crate::autodiff::sparse::{spmm_kernel, spmm_transposed_kernel, CsrMatrix, EdgePattern};
use crate::autodiff::tensor::{gemm, Operand};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Floor applied to `log` inputs in [`NumericMode::Clamped`].
pub const NUMERIC_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How `log` treats non-positive inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NumericMode {
    /// Reject with an error.
    #[default]
    Strict,
    /// Clamp the input at [`NUMERIC_EPS`]; the gradient is zero below the floor.
    Clamped,
}

type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Spmm(Arc<CsrMatrix>, Var),
    SpmmValues {
        pattern: Arc<EdgePattern>,
        values: Var,
        x: Var,
    },
    NormalizeAdjacency {
        pattern: Arc<EdgePattern>,
        weights: Var,
        inv_sqrt: Vec<f64>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Diag(Var),
    ConcatRows(Vec<Var>),
    RowGather(Var, Arc<[usize]>),
    Prelu(Var, Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    RowL2Normalize(Var, Vec<f64>),
    Clamp(Var, f64, f64),
    StraightThrough(Var),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so every input precedes the node
/// that consumes it and the reverse pass walks indices backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: NumericMode,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn row_broadcast(op: &'static str, a: &Tensor, row: &Tensor) -> Result<()> {
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: row.shape(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.rows(), a.cols(), data).expect("shapes checked")
}

fn row_map(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let r = row.data();
    Tensor::from_fn(a.rows(), a.cols(), |i, j| f(a.get(i, j), r[j]))
}

fn column_sums(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, a.cols());
    for i in 0..a.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: NumericMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> NumericMode {
        self.mode
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm(Operand::plain(ta), Operand::transposed(tb), &mut out, false);
        self.push("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    /// Sparse (fixed values) times dense.
    pub fn spmm(&mut self, adj: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if adj.cols != tx.rows() {
            return Err(Error::ShapeMismatch {
                op: "spmm",
                left: (adj.rows, adj.cols),
                right: tx.shape(),
            });
        }
        let value = adj.mul_dense(tx);
        self.push("spmm", value, Op::Spmm(Arc::clone(adj), x), &[x])
    }

    /// Sparse times dense where the sparse values (`nnz x 1`) live on the tape.
    pub fn spmm_values(&mut self, pattern: &Arc<EdgePattern>, values: Var, x: Var) -> Result<Var> {
        let (tv, tx) = (self.value(values), self.value(x));
        if tv.shape() != (pattern.nnz(), 1) {
            return Err(Error::ShapeMismatch {
                op: "spmm_values",
                left: (pattern.nnz(), 1),
                right: tv.shape(),
            });
        }
        if tx.rows() != pattern.num_nodes {
            return Err(Error::ShapeMismatch {
                op: "spmm_values",
                left: (pattern.num_nodes, pattern.num_nodes),
                right: tx.shape(),
            });
        }
        let value = spmm_kernel(&pattern.row_ptr, &pattern.col_idx, tv.data(), tx);
        let op = Op::SpmmValues {
            pattern: Arc::clone(pattern),
            values,
            x,
        };
        self.push("spmm_values", value, op, &[values, x])
    }

    /// Normalised adjacency values (`nnz x 1`) from per-edge weights (`E x 1`).
    pub fn normalize_adjacency(&mut self, pattern: &Arc<EdgePattern>, weights: Var) -> Result<Var> {
        let tw = self.value(weights);
        if tw.shape() != (pattern.num_edges, 1) {
            return Err(Error::ShapeMismatch {
                op: "normalize_adjacency",
                left: (pattern.num_edges, 1),
                right: tw.shape(),
            });
        }
        let (values, inv_sqrt) = pattern.normalized_values(tw.data());
        let value = Tensor::new(values.len(), 1, values)?;
        let op = Op::NormalizeAdjacency {
            pattern: Arc::clone(pattern),
            weights,
            inv_sqrt,
        };
        self.push("normalize_adjacency", value, op, &[weights])
    }

    /// Elementwise sum; `b` may also be a `1 x d` row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let value = zip_map(ta, tb, |x, y| x + y);
            self.push("add", value, Op::Add(a, b), &[a, b])
        } else {
            row_broadcast("add", ta, tb)?;
            let value = row_map(ta, tb, |x, y| x + y);
            self.push("add", value, Op::AddRow(a, b), &[a, b])
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let value = zip_map(ta, tb, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product; `b` may also be a `1 x d` row broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let value = zip_map(ta, tb, |x, y| x * y);
            self.push("mul", value, Op::Mul(a, b), &[a, b])
        } else {
            row_broadcast("mul", ta, tb)?;
            let value = row_map(ta, tb, |x, y| x * y);
            self.push("mul", value, Op::MulRow(a, b), &[a, b])
        }
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let value = match self.mode {
            NumericMode::Strict => {
                if let Some(&bad) = ta.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::NonPositive {
                        op: "log",
                        value: bad,
                    });
                }
                ta.map(f64::ln)
            }
            NumericMode::Clamped => ta.map(|v| v.max(NUMERIC_EPS).ln()),
        };
        self.push("log", value, Op::Log(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| -v);
        self.push("neg", value, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "mean",
                left: ta.shape(),
                right: (1, 1),
            });
        }
        let value = Tensor::scalar(ta.sum() / ta.len() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// `n x d -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::from_fn(ta.rows(), 1, |i, _| ta.row(i).iter().sum());
        self.push("row_sum", value, Op::RowSum(a), &[a])
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != ta.cols() {
            return Err(Error::ShapeMismatch {
                op: "diag",
                left: ta.shape(),
                right: (ta.rows(), ta.rows()),
            });
        }
        let value = Tensor::from_fn(ta.rows(), 1, |i, _| ta.get(i, i));
        self.push("diag", value, Op::Diag(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `out[i] = a[index[i]]`.
    pub fn row_gather(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::ShapeMismatch {
                op: "row_gather",
                left: ta.shape(),
                right: (bad, ta.cols()),
            });
        }
        let mut data = Vec::with_capacity(index.len() * ta.cols());
        for &i in index.iter() {
            data.extend_from_slice(ta.row(i));
        }
        let value = Tensor::new(index.len(), ta.cols(), data)?;
        self.push("row_gather", value, Op::RowGather(a, index), &[a])
    }

    /// PReLU with one slope per column; `slope` is `1 x d`.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(slope));
        row_broadcast("prelu", ta, ts)?;
        let value = row_map(ta, ts, |x, s| if x > 0.0 { x } else { s * x });
        self.push("prelu", value, Op::Prelu(a, slope), &[a, slope])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(softplus);
        self.push("softplus", value, Op::Softplus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    /// Divides each row by its Euclidean norm.
    ///
    /// Zero rows are rejected in strict mode. In clamped mode a row with norm
    /// below [`NUMERIC_EPS`] maps to zero and passes no gradient.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let clamped = self.mode == NumericMode::Clamped;
        let ta = self.value(a);
        let mut norms = Vec::with_capacity(ta.rows());
        for i in 0..ta.rows() {
            let n = ta.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() || (n == 0.0 && !clamped) {
                return Err(Error::DegenerateEmbedding { row: i });
            }
            // 0 marks a floored row for the backward pass
            norms.push(if clamped && n < NUMERIC_EPS { 0.0 } else { n });
        }
        let value = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| {
            if norms[i] == 0.0 {
                0.0
            } else {
                ta.get(i, j) / norms[i]
            }
        });
        self.push(
            "row_l2_normalize",
            value,
            Op::RowL2Normalize(a, norms),
            &[a],
        )
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp(a, lo, hi), &[a])
    }

    /// Which side of each piecewise-linear break every recorded ReLU, PReLU
    /// and clamp input sits on. Two evaluations with equal patterns lie in
    /// the same linear region of those ops.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) | Op::Prelu(a, _) => {
                    out.extend(self.value(a).data().iter().map(|&x| u8::from(x > 0.0)));
                }
                Op::Clamp(a, lo, hi) => {
                    out.extend(self.value(a).data().iter().map(|&x| {
                        if x < lo {
                            0
                        } else if x > hi {
                            2
                        } else {
                            1
                        }
                    }));
                }
                _ => {}
            }
        }
        out
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        same_shape("straight_through", &hard, self.value(soft))?;
        self.push("straight_through", hard, Op::StraightThrough(soft), &[soft])
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// `backward(grad_out, inputs, output)` must return one gradient per input,
    /// each shaped like that input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom(inputs.to_vec(), Box::new(backward)),
            inputs,
        )
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: out.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(ta.rows(), ta.cols());
                    gemm(Operand::plain(g), Operand::transposed(tb), &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    gemm(Operand::transposed(ta), Operand::plain(g), &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(ta.rows(), ta.cols());
                    gemm(Operand::plain(g), Operand::plain(tb), &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    gemm(Operand::transposed(g), Operand::plain(ta), &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Spmm(adj, x) => {
                self.accumulate(grads, *x, adj.mul_dense_transposed(g));
            }
            Op::SpmmValues { pattern, values, x } => {
                let (tv, tx) = (self.value(*values), self.value(*x));
                if self.requires_grad(*x) {
                    let dx = spmm_transposed_kernel(
                        &pattern.row_ptr,
                        &pattern.col_idx,
                        tv.data(),
                        pattern.num_nodes,
                        g,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*values) {
                    let mut dv = Vec::with_capacity(pattern.nnz());
                    for r in 0..pattern.num_nodes {
                        let gr = g.row(r);
                        for k in pattern.row_ptr[r]..pattern.row_ptr[r + 1] {
                            let xr = tx.row(pattern.col_idx[k]);
                            dv.push(gr.iter().zip(xr).map(|(a, b)| a * b).sum());
                        }
                    }
                    let dv = Tensor::new(pattern.nnz(), 1, dv).expect("nnz");
                    self.accumulate(grads, *values, dv);
                }
            }
            Op::NormalizeAdjacency {
                pattern,
                weights,
                inv_sqrt,
            } => {
                let tw = self.value(*weights);
                let rows = pattern.entry_rows();
                let a = y.data();
                let gk = g.data();
                // dL/d(degree_x) = -1/2 r_x^2 * sum over entries touching x of g_k a_k
                let mut touch = vec![0.0; pattern.num_nodes];
                for k in 0..pattern.nnz() {
                    let ga = gk[k] * a[k];
                    touch[rows[k]] += ga;
                    touch[pattern.col_idx[k]] += ga;
                }
                let d_degree: Vec<f64> = touch
                    .iter()
                    .zip(inv_sqrt)
                    .map(|(s, r)| -0.5 * r * r * s)
                    .collect();
                let mut dw = vec![0.0; pattern.num_edges];
                for k in 0..pattern.nnz() {
                    if let Some(e) = pattern.entry_edge[k] {
                        let (r, c) = (rows[k], pattern.col_idx[k]);
                        dw[e] += gk[k] * inv_sqrt[r] * inv_sqrt[c] + d_degree[r];
                    }
                }
                let dw = Tensor::new(tw.rows(), 1, dw).expect("edges");
                self.accumulate(grads, *weights, dw);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, column_sums(g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, zip_map(g, tb, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, zip_map(g, ta, |x, y| x * y));
                }
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, row_map(g, tb, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, column_sums(&zip_map(g, ta, |x, y| x * y)));
                }
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, y, |x, y| x * y)),
            Op::Log(a) => {
                let ta = self.value(*a);
                let clamped = self.mode == NumericMode::Clamped;
                let da = zip_map(g, ta, |gv, x| {
                    if clamped && x < NUMERIC_EPS {
                        0.0
                    } else {
                        gv / x
                    }
                });
                self.accumulate(grads, *a, da);
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Sum(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(ta.rows(), ta.cols(), g.to_scalar()));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = g.to_scalar() / ta.len() as f64;
                self.accumulate(grads, *a, Tensor::full(ta.rows(), ta.cols(), v));
            }
            Op::RowSum(a) => {
                let ta = self.value(*a);
                let da = Tensor::from_fn(ta.rows(), ta.cols(), |i, _| g.get(i, 0));
                self.accumulate(grads, *a, da);
            }
            Op::Diag(a) => {
                let n = self.value(*a).rows();
                let da = Tensor::from_fn(n, n, |i, j| if i == j { g.get(i, 0) } else { 0.0 });
                self.accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let slice = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    self.accumulate(grads, p, Tensor::new(r, cols, slice).expect("rows"));
                    offset += r;
                }
            }
            Op::RowGather(a, index) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for (i, &src) in index.iter().enumerate() {
                    for (d, v) in da.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Prelu(a, slope) => {
                let (ta, ts) = (self.value(*a), self.value(*slope));
                if self.requires_grad(*a) {
                    let s = ts.data();
                    let da = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| {
                        let gv = g.get(i, j);
                        if ta.get(i, j) > 0.0 {
                            gv
                        } else {
                            s[j] * gv
                        }
                    });
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*slope) {
                    let mut ds = Tensor::zeros(1, ta.cols());
                    for i in 0..ta.rows() {
                        for j in 0..ta.cols() {
                            let x = ta.get(i, j);
                            if x <= 0.0 {
                                ds.data_mut()[j] += g.get(i, j) * x;
                            }
                        }
                    }
                    self.accumulate(grads, *slope, ds);
                }
            }
            Op::Relu(a) => {
                let da = zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, da);
            }
            Op::Softplus(a) => {
                let da = zip_map(g, self.value(*a), |gv, x| gv * sigmoid(x));
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, zip_map(g, y, |gv, s| gv * s * (1.0 - s)));
            }
            Op::RowL2Normalize(a, norms) => {
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in da.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / n;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let da = zip_map(g, self.value(*a), |gv, x| {
                    if x >= *lo && x <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, da);
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, g.clone()),
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let partials = backward(g, &values, y);
                for (&v, d) in inputs.iter().zip(partials) {
                    self.accumulate(grads, v, d);
                }
            }
        }
    }
}
