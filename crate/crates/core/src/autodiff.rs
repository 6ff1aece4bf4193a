//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its output value. Nodes whose inputs are
//! all constants are stored as constants and never visited by `backward`.

use std::sync::Arc;

use crate::tensor::{CsrMatrix, Tensor};

/// Lower clamp applied to the argument of [`Tape::log`].
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: [usize; 2], len: usize },
    #[error("index {index} out of range ({bound}) in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be 1x1, got {0:?}")]
    NotScalar([usize; 2]),
    #[error("loss does not depend on any trainable leaf")]
    Detached,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    SpMM(Arc<CsrMatrix>, usize),
    EdgeSpMM {
        pattern: Arc<CsrMatrix>,
        weights: usize,
        dense: usize,
    },
    Add(usize, usize),
    AddRow(usize, usize),
    AddConst(usize),
    Mul(usize, usize),
    MulConst(usize, Tensor),
    Scale(usize, f64),
    ConcatCols(Vec<usize>),
    Relu(usize),
    Elu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    SoftmaxRows(usize),
    Log(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    GatherRows(usize, Vec<usize>),
    Pick(usize, Vec<(usize, usize)>),
    SegmentSoftmax(usize, Vec<usize>),
    RowCosine(usize, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// reach the loss.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape[0], shape[1]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a.0, b.0), &[a, b])
    }

    /// Constant sparse matrix times dense input.
    pub fn spmm(&mut self, m: &Arc<CsrMatrix>, b: Var) -> Result<Var, TensorError> {
        let out = m.matmul_dense(self.value(b))?;
        self.push("spmm", out, Op::SpMM(Arc::clone(m), b.0), &[b])
    }

    /// Sparse product whose stored values are replaced by the differentiable
    /// column `weights` (one entry per stored element of `pattern`).
    pub fn edge_spmm(&mut self, pattern: &Arc<CsrMatrix>, weights: Var, dense: Var) -> Result<Var, TensorError> {
        let ws = self.shape(weights);
        if ws != [pattern.nnz(), 1] {
            return Err(TensorError::ShapeMismatch {
                op: "edge_spmm",
                lhs: [pattern.nnz(), 1],
                rhs: ws,
            });
        }
        let ds = self.shape(dense);
        if ds[0] != pattern.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "edge_spmm",
                lhs: [pattern.rows(), pattern.cols()],
                rhs: ds,
            });
        }
        let out = pattern.spmm_with(Some(self.value(weights).data()), self.value(dense));
        let op = Op::EdgeSpMM {
            pattern: Arc::clone(pattern),
            weights: weights.0,
            dense: dense.0,
        };
        self.push("edge_spmm", out, op, &[weights, dense])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        self.push("add", out, Op::Add(a.0, b.0), &[a, b])
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != [1, sa[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let bias = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(sa[1].max(1)) {
            for (o, b) in chunk.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a.0, row.0), &[a, row])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("add_scalar", a, |x| x + c, Op::AddConst(a.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        self.push("mul", out, Op::Mul(a.0, b.0), &[a, b])
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if sa != c.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                lhs: sa,
                rhs: c.shape(),
            });
        }
        let out = Tensor::new(
            sa,
            self.value(a)
                .data()
                .iter()
                .zip(c.data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        self.push("mul_const", out, Op::MulConst(a.0, c.clone()), &[a])
    }

    /// Applies a precomputed dropout mask (entries `0` or `1/(1-q)`).
    pub fn dropout_apply(&mut self, a: Var, mask: &Tensor) -> Result<Var, TensorError> {
        self.mul_const(a, mask)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.unary("scale", a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = parts.first().map_or(0, |&p| self.shape(p)[0]);
        for &p in parts {
            if self.shape(p)[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: self.shape(p),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new([rows, total], data)?;
        let ids = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", out, Op::ConcatCols(ids), parts)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("elu", a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a.0, slope),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, f64::exp, Op::Exp(a.0))
    }

    /// Natural log with the argument clamped below at [`LOG_EPS`].
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", a, |x| x.max(LOG_EPS).ln(), Op::Log(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = v.clone();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(a.0), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.push("mean", Tensor::scalar(m), Op::Mean(a.0), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let bound = self.shape(a)[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= bound) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound,
            });
        }
        let out = self.value(a).select_rows(rows);
        self.push("gather_rows", out, Op::GatherRows(a.0, rows.to_vec()), &[a])
    }

    /// Collects the entries at `(row, col)` into an `n x 1` column.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var, TensorError> {
        let [rows, cols] = self.shape(a);
        for &(r, c) in entries {
            if r >= rows || c >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: r * cols + c,
                    bound: rows * cols,
                });
            }
        }
        let v = self.value(a);
        let out = Tensor::column(entries.iter().map(|&(r, c)| v.get(r, c)).collect());
        self.push("pick", out, Op::Pick(a.0, entries.to_vec()), &[a])
    }

    /// Softmax over contiguous segments of an `n x 1` column. `offsets` has
    /// one more entry than there are segments and ends at `n`.
    pub fn segment_softmax(&mut self, a: Var, offsets: &[usize]) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let end = offsets.last().copied().unwrap_or(0);
        if sa[1] != 1 || end != sa[0] || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                lhs: sa,
                rhs: [end, 1],
            });
        }
        let mut out = self.value(a).clone();
        for w in offsets.windows(2) {
            softmax_in_place(&mut out.data_mut()[w[0]..w[1]]);
        }
        self.push(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(a.0, offsets.to_vec()),
            &[a],
        )
    }

    /// Cosine similarity between row pairs of `a`, as an `n x 1` column.
    /// A pair involving a zero row has similarity 0.
    pub fn row_cosine(&mut self, a: Var, pairs: &[(usize, usize)]) -> Result<Var, TensorError> {
        let bound = self.shape(a)[0];
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= bound || j >= bound) {
            return Err(TensorError::IndexOutOfRange {
                op: "row_cosine",
                index: i.max(j),
                bound,
            });
        }
        let v = self.value(a);
        let out = Tensor::column(pairs.iter().map(|&(i, j)| cosine(v.row(i), v.row(j))).collect());
        self.push("row_cosine", out, Op::RowCosine(a.0, pairs.to_vec()), &[a])
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(TensorError::NotScalar(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        if !self.value(loss).is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.len();
        let slot = grads[target].get_or_insert_with(|| vec![0.0; len]);
        contrib(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gt = Tensor::new(out.shape(), g.to_vec()).expect("grad shape");
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let ga = gt.matmul(&vb.transpose()).expect("matmul grad");
                    self.accumulate(grads, *a, |s| add_into(s, ga.data()));
                }
                if self.nodes[*b].requires_grad {
                    let gb = va.transpose().matmul(&gt).expect("matmul grad");
                    self.accumulate(grads, *b, |s| add_into(s, gb.data()));
                }
            }
            Op::SpMM(m, b) => {
                let gt = Tensor::new(out.shape(), g.to_vec()).expect("grad shape");
                let gb = m.spmm_transpose_with(None, &gt);
                self.accumulate(grads, *b, |s| add_into(s, gb.data()));
            }
            Op::EdgeSpMM {
                pattern,
                weights,
                dense,
            } => {
                let gt = Tensor::new(out.shape(), g.to_vec()).expect("grad shape");
                let w = &self.nodes[*weights].value;
                let d = &self.nodes[*dense].value;
                if self.nodes[*weights].requires_grad {
                    let rows = pattern.row_of_entries();
                    let gw: Vec<f64> = rows
                        .iter()
                        .zip(pattern.indices())
                        .map(|(&r, &c)| dot(gt.row(r), d.row(c)))
                        .collect();
                    self.accumulate(grads, *weights, |s| add_into(s, &gw));
                }
                if self.nodes[*dense].requires_grad {
                    let gd = pattern.spmm_transpose_with(Some(w.data()), &gt);
                    self.accumulate(grads, *dense, |s| add_into(s, gd.data()));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                let cols = out.cols().max(1);
                self.accumulate(grads, *r, |s| {
                    for chunk in g.chunks(cols) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::AddConst(a) => self.accumulate(grads, *a, |s| add_into(s, g)),
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(grads, *a, |s| {
                    for ((s, gi), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += gi * y;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((s, gi), x) in s.iter_mut().zip(g).zip(va) {
                        *s += gi * x;
                    }
                });
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, |s| {
                for ((s, gi), ci) in s.iter_mut().zip(g).zip(c.data()) {
                    *s += gi * ci;
                }
            }),
            Op::Scale(a, k) => self.accumulate(grads, *a, |s| {
                for (s, gi) in s.iter_mut().zip(g) {
                    *s += gi * k;
                }
            }),
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let width = self.nodes[p].value.cols();
                    self.accumulate(grads, p, |s| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + width];
                            add_into(&mut s[r * width..(r + 1) * width], src);
                        }
                    });
                    offset += width;
                }
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |s| {
                    for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *s += gi;
                        }
                    }
                });
            }
            Op::Elu(a) => {
                let x = self.nodes[*a].value.data();
                let y = out.data();
                self.accumulate(grads, *a, |s| {
                    for (((s, gi), xi), yi) in s.iter_mut().zip(g).zip(x).zip(y) {
                        *s += if *xi > 0.0 { *gi } else { gi * (yi + 1.0) };
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |s| {
                    for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        *s += if *xi > 0.0 { *gi } else { gi * slope };
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                self.accumulate(grads, *a, |s| {
                    for ((s, gi), yi) in s.iter_mut().zip(g).zip(y) {
                        *s += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                self.accumulate(grads, *a, |s| {
                    for ((s, gi), yi) in s.iter_mut().zip(g).zip(y) {
                        *s += gi * yi;
                    }
                });
            }
            Op::Log(a) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |s| {
                    for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        if *xi > LOG_EPS {
                            *s += gi / xi;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols().max(1);
                let y = out.data();
                self.accumulate(grads, *a, |s| {
                    for ((sr, gr), yr) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        softmax_backward(sr, gr, yr);
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |s| {
                for v in s.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Mean(a) => self.accumulate(grads, *a, |s| {
                let k = g[0] / s.len().max(1) as f64;
                for v in s.iter_mut() {
                    *v += k;
                }
            }),
            Op::GatherRows(a, rows) => {
                let cols = out.cols();
                self.accumulate(grads, *a, |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut s[r * cols..(r + 1) * cols], &g[k * cols..(k + 1) * cols]);
                    }
                });
            }
            Op::Pick(a, entries) => {
                let cols = self.nodes[*a].value.cols();
                self.accumulate(grads, *a, |s| {
                    for (k, &(r, c)) in entries.iter().enumerate() {
                        s[r * cols + c] += g[k];
                    }
                });
            }
            Op::SegmentSoftmax(a, offsets) => {
                let y = out.data();
                self.accumulate(grads, *a, |s| {
                    for w in offsets.windows(2) {
                        let r = w[0]..w[1];
                        softmax_backward(&mut s[r.clone()], &g[r.clone()], &y[r]);
                    }
                });
            }
            Op::RowCosine(a, pairs) => {
                let v = &self.nodes[*a].value;
                let cols = v.cols();
                self.accumulate(grads, *a, |s| {
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let (u, w) = (v.row(i), v.row(j));
                        let (nu, nw) = (norm(u), norm(w));
                        if nu == 0.0 || nw == 0.0 {
                            continue;
                        }
                        let c = out.data()[k];
                        let gk = g[k];
                        for d in 0..cols {
                            s[i * cols + d] += gk * (w[d] / (nu * nw) - c * u[d] / (nu * nu));
                            s[j * cols + d] += gk * (u[d] / (nu * nw) - c * w[d] / (nw * nw));
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(dst: &mut [f64], g: &[f64], y: &[f64]) {
    let inner = dot(g, y);
    for ((d, gi), yi) in dst.iter_mut().zip(g).zip(y) {
        *d += yi * (gi - inner);
    }
}
