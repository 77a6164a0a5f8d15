use super::tensor::{matmul_nt, matmul_raw, matmul_tn};
use super::{AutodiffError, Tensor};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
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
    Mean(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of tensor ops for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. A node requires grad when it is a trainable leaf or
/// when any of its inputs does; only such nodes ever get a gradient buffer.
/// A tape supports one [`Tape::backward`]; after that it must be cleared.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contribution: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), contribution).expect("gradient shape"));
        }
    }
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    out
}

fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Row-wise softmax on plain slices (no recording).
pub fn softmax_values(data: &[f64], cols: usize) -> Vec<f64> {
    softmax_rows(data, cols)
}

/// Row-wise log-softmax on plain slices (no recording).
pub fn log_softmax_values(data: &[f64], cols: usize) -> Vec<f64> {
    log_softmax_rows(data, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, saved activation and gradient buffer.
    pub fn clear(&mut self) {
        self.nodes = Vec::new();
        self.grads = Vec::new();
        self.consumed = false;
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records a frozen leaf; it never receives a gradient buffer.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
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

    /// Gradient accumulated by the last backward pass, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of allocated gradient buffers (for isolation checks).
    pub fn grad_buffer_count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<(), AutodiffError> {
        if v.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownVar(v.0));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutodiffError> {
        self.check(v)?;
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {m}x{k} · {k2}x{n}")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, data), Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        if !self.value(a).same_shape(self.value(b)) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(row)?;
        let cols = self.value(a).cols();
        if self.value(row).len() != cols {
            return Err(shape_err(
                "add_row",
                format!("row of {} for {:?}", self.value(row).len(), self.value(a).shape()),
            ));
        }
        let va = self.value(a);
        let r = self.value(row).data();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let v = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push("add_row", v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let va = self.value(a);
        let v = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * factor).collect()).expect("shape");
        self.push("scale", v, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let va = self.value(a);
        let v = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x.max(0.0)).collect()).expect("shape");
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    /// Softmax along the last dimension, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let va = self.value(a);
        if va.cols() == 0 {
            return Err(shape_err("softmax", "empty rows".into()));
        }
        let v = Tensor::new(va.shape().to_vec(), softmax_rows(va.data(), va.cols())).expect("shape");
        self.push("softmax", v, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let va = self.value(a);
        if va.cols() == 0 {
            return Err(shape_err("log_softmax", "empty rows".into()));
        }
        let v = Tensor::new(va.shape().to_vec(), log_softmax_rows(va.data(), va.cols())).expect("shape");
        self.push("log_softmax", v, Op::LogSoftmax(a), &[a])
    }

    /// Per-row standardization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let vx = self.value(x);
        let d = vx.cols();
        if d < 2 {
            return Err(shape_err("layer_norm", format!("row length {d} < 2")));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", format!("affine length must be {d}")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), out).expect("shape");
        self.push(
            "layer_norm",
            v,
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

    /// Gathers rows of `table` (`V×d`) into an `ids.len()×d` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (vocab, d) = self.matrix_dims("embedding", table)?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::Index {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let v = Tensor::matrix(ids.len(), d, data);
        self.push(
            "embedding",
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let (_, cols) = self.matrix_dims("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("column mismatch {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let (rows, _) = self.matrix_dims("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("row mismatch {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix_dims("slice_rows", x)?;
        if start + len > rows {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {rows}")));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        self.push("slice_rows", Tensor::matrix(len, cols, data), Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix_dims("slice_cols", x)?;
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        self.push("slice_cols", Tensor::matrix(rows, len, data), Op::SliceCols { x, start }, &[x])
    }

    /// Column means of an `m×n` matrix, as `1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix_dims("mean_rows", x)?;
        if rows == 0 {
            return Err(shape_err("mean_rows", "no rows".into()));
        }
        let mut data = vec![0.0; cols];
        for row in self.value(x).data().chunks(cols) {
            for (a, b) in data.iter_mut().zip(row) {
                *a += b;
            }
        }
        for a in &mut data {
            *a /= rows as f64;
        }
        self.push("mean_rows", Tensor::matrix(1, cols, data), Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check(x)?;
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix_dims("transpose", x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        self.push("transpose", Tensor::matrix(cols, rows, data), Op::Transpose(x), &[x])
    }

    /// Propagates d(loss)/d(node) to every node that requires grad.
    ///
    /// The tape is consumed: further ops or a second backward return
    /// [`AutodiffError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        self.check(loss)?;
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = val(*a);
                let vb = val(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if wants(*a) {
                    accumulate(&mut grads[a.0], va.shape(), matmul_nt(gd, vb.data(), m, n, k));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], vb.shape(), matmul_tn(va.data(), gd, m, k, n));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        accumulate(&mut grads[v.0], val(*v).shape(), gd.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], val(*a).shape(), gd.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], val(*b).shape(), gd.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let c = gd.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], val(*a).shape(), c);
                }
                if wants(*b) {
                    let c = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], val(*b).shape(), c);
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], val(*a).shape(), gd.to_vec());
                }
                if wants(*row) {
                    let cols = g.cols();
                    let mut c = vec![0.0; cols];
                    for chunk in gd.chunks(cols) {
                        for (acc, x) in c.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads[row.0], val(*row).shape(), c);
                }
            }
            Op::Scale(a, factor) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], val(*a).shape(), gd.iter().map(|x| x * factor).collect());
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let c = gd
                        .iter()
                        .zip(val(*a).data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], val(*a).shape(), c);
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let c = gd
                        .iter()
                        .zip(val(*a).data())
                        .map(|(gv, &x)| {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    accumulate(&mut grads[a.0], val(*a).shape(), c);
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let mut c = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(cols).zip(gd.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        c.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                    }
                    accumulate(&mut grads[a.0], val(*a).shape(), c);
                }
            }
            Op::LogSoftmax(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let mut c = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(cols).zip(gd.chunks(cols)) {
                        let total: f64 = gr.iter().sum();
                        c.extend(yr.iter().zip(gr).map(|(ly, q)| q - ly.exp() * total));
                    }
                    accumulate(&mut grads[a.0], val(*a).shape(), c);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gain_v = val(*gain).data();
                if wants(*x) {
                    let mut c = Vec::with_capacity(gd.len());
                    for (r, (gr, hr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let gh: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghh: f64 = gh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        c.extend(
                            gh.iter()
                                .zip(hr)
                                .map(|(a, h)| scale * (d as f64 * a - sum_gh - h * sum_ghh)),
                        );
                    }
                    accumulate(&mut grads[x.0], val(*x).shape(), c);
                }
                if wants(*gain) {
                    let mut c = vec![0.0; d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            c[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(&mut grads[gain.0], val(*gain).shape(), c);
                }
                if wants(*bias) {
                    let mut c = vec![0.0; d];
                    for gr in gd.chunks(d) {
                        for j in 0..d {
                            c[j] += gr[j];
                        }
                    }
                    accumulate(&mut grads[bias.0], val(*bias).shape(), c);
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let vt = val(*table);
                    let d = vt.cols();
                    let mut c = vec![0.0; vt.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            c[id * d + j] += gd[r * d + j];
                        }
                    }
                    accumulate(&mut grads[table.0], vt.shape(), c);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if wants(*p) {
                        accumulate(&mut grads[p.0], val(*p).shape(), gd[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut start = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if wants(*p) {
                        let mut c = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            c.extend_from_slice(&gd[i * total + start..i * total + start + w]);
                        }
                        accumulate(&mut grads[p.0], val(*p).shape(), c);
                    }
                    start += w;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let vx = val(*x);
                    let cols = vx.cols();
                    let mut c = vec![0.0; vx.len()];
                    c[start * cols..start * cols + gd.len()].copy_from_slice(gd);
                    accumulate(&mut grads[x.0], vx.shape(), c);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let vx = val(*x);
                    let cols = vx.cols();
                    let w = g.cols();
                    let mut c = vec![0.0; vx.len()];
                    for (i, gr) in gd.chunks(w).enumerate() {
                        c[i * cols + start..i * cols + start + w].copy_from_slice(gr);
                    }
                    accumulate(&mut grads[x.0], vx.shape(), c);
                }
            }
            Op::MeanRows(x) => {
                if wants(*x) {
                    let vx = val(*x);
                    let rows = vx.rows() as f64;
                    let mut c = Vec::with_capacity(vx.len());
                    for _ in 0..vx.rows() {
                        c.extend(gd.iter().map(|v| v / rows));
                    }
                    accumulate(&mut grads[x.0], vx.shape(), c);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let vx = val(*x);
                    accumulate(&mut grads[x.0], vx.shape(), vec![gd[0]; vx.len()]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let vx = val(*x);
                    accumulate(&mut grads[x.0], vx.shape(), vec![gd[0] / vx.len() as f64; vx.len()]);
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let vx = val(*x);
                    let (rows, cols) = (vx.shape()[0], vx.shape()[1]);
                    let mut c = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            c[i * cols + j] = gd[j * rows + i];
                        }
                    }
                    accumulate(&mut grads[x.0], vx.shape(), c);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c), t.value(b));
    }

    #[test]
    fn hand_matmul() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
        assert_eq!(t.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::Shape { .. })));
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![-1.0, -2.0, -0.5]));
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 0.0]);
        let s = t.sum(r).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::vector(vec![0.0; 4]));
        let p = t.softmax(z).unwrap();
        approx(t.value(p).data(), &[0.25; 4], 1e-15);

        let z = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let p = t.softmax(z).unwrap();
        let v = t.value(p).data();
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!(v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn layer_norm_two_point() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 3.0]));
        let g = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.layer_norm(x, g, b).unwrap();
        approx(t.value(y).data(), &[-1.0, 1.0], 1e-4);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![4.0; 5]));
        let g = t.constant(Tensor::vector(vec![1.0; 5]));
        let b = t.constant(Tensor::vector(vec![0.0; 5]));
        let y = t.layer_norm(x, g, b).unwrap();
        approx(t.value(y).data(), &[0.0; 5], 0.0);
    }

    #[test]
    fn sum_of_linear_map_gradient_is_outer_product() {
        let mut t = Tape::new();
        let w = t.param(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let x = t.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = t.sum(w).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(AutodiffError::TapeConsumed)));
        assert!(matches!(t.sum(w), Err(AutodiffError::TapeConsumed)));
        t.clear();
        assert!(t.is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(AutodiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn diamond_accumulates() {
        // y = sum(w*w + 3w): dy/dw = 2w + 3
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let sq = t.mul(w, w).unwrap();
        let lin = t.scale(w, 3.0).unwrap();
        let s = t.add(sq, lin).unwrap();
        let loss = t.sum(s).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[4.0, 1.0, 7.0]);
    }

    #[test]
    fn frozen_leaves_get_no_buffer() {
        let mut t = Tape::new();
        let w = t.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let c = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let y = t.matmul(w, c).unwrap();
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(c).is_none());
        assert!(t.grad(w).is_some());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![f64::MAX, f64::MAX]));
        assert!(matches!(t.scale(a, 10.0), Err(AutodiffError::NonFinite { .. })));
    }

    #[test]
    fn embedding_checks_bounds() {
        let mut t = Tape::new();
        let table = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.embedding(table, &[3]), Err(AutodiffError::Index { .. })));
    }
}
