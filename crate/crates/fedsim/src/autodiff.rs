//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`] then
//! walks the tape in reverse and accumulates gradients for every node. The
//! graph is rebuilt per forward pass and is confined to one thread; distinct
//! graphs may run on different threads concurrently.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Matrix plus a row vector broadcast over every row.
    AddRow(usize, usize),
    /// Row `i` of the matrix scaled by entry `i` of a vector.
    ScaleRows(usize, usize),
    SliceCols {
        src: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    /// Stack single-row matrices (or vectors) into one matrix.
    StackRows(Vec<usize>),
    /// Column means: `[m,n] -> [1,n]`.
    MeanRows(usize),
    SumAll(usize),
    MulScalar(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Exp(usize),
    PowScalar(usize, f64),
    Relu(usize),
    Softmax {
        src: usize,
        axis: usize,
    },
    LogSoftmax {
        src: usize,
        axis: usize,
    },
    LayerNorm {
        src: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    /// `out[i] = src[i, labels[i]]`, shape `[m]`.
    PickPerRow {
        src: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held at a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at a node by the last [`Graph::backward`] call.
    /// Same shape as the node's value.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::from_shape(node.value.shape().to_vec(), node.grad.clone())
            .expect("gradient buffer matches value shape")
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, context: &str) -> Result<Var> {
        value.check_finite(context)?;
        Ok(self.push(op, value))
    }

    // ---- construction ops ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_accum(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        self.push_checked(Op::MatMul(a.0, b.0), value, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got {:?}",
                t.shape()
            )));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.at(i, j);
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        self.push_checked(Op::Transpose(a.0), value, "transpose")
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<f64>, Vec<usize>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        Ok((ta.data().to_vec(), ta.shape().to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, shape) = self.elementwise(a, b, "add")?;
        for (o, v) in out.iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let value = Tensor::from_shape(shape, out)?;
        self.push_checked(Op::Add(a.0, b.0), value, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, shape) = self.elementwise(a, b, "sub")?;
        for (o, v) in out.iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let value = Tensor::from_shape(shape, out)?;
        self.push_checked(Op::Sub(a.0, b.0), value, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, shape) = self.elementwise(a, b, "mul")?;
        for (o, v) in out.iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let value = Tensor::from_shape(shape, out)?;
        self.push_checked(Op::Mul(a.0, b.0), value, "mul")
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(row));
        if tm.rank() != 2 || tr.rank() != 1 || tm.shape()[1] != tr.shape()[0] {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                tm.shape(),
                tr.shape()
            )));
        }
        let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
        let mut out = tm.data().to_vec();
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] += tr.data()[j];
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        self.push_checked(Op::AddRow(m.0, row.0), value, "add_row")
    }

    pub fn scale_rows(&mut self, m: Var, scales: Var) -> Result<Var> {
        let (tm, ts) = (self.value(m), self.value(scales));
        if tm.rank() != 2 || ts.rank() != 1 || tm.shape()[0] != ts.shape()[0] {
            return Err(Error::Shape(format!(
                "scale_rows: {:?} by {:?}",
                tm.shape(),
                ts.shape()
            )));
        }
        let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
        let mut out = tm.data().to_vec();
        for i in 0..rows {
            let s = ts.data()[i];
            for v in &mut out[i * cols..(i + 1) * cols] {
                *v *= s;
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        self.push_checked(Op::ScaleRows(m.0, scales.0), value, "scale_rows")
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if t.rank() != 2 || start + len > t.shape()[1] {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {start}+{len}) of {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&t.data()[i * cols + start..i * cols + start + len]);
        }
        let value = Tensor::matrix(rows, len, out)?;
        self.push_checked(Op::SliceCols { src: src.0, start, len }, value, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
            total += t.shape()[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        let op = Op::ConcatCols(parts.iter().map(|v| v.0).collect());
        self.push_checked(op, value, "concat_cols")
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows of zero rows".into()));
        }
        let cols = self.value(rows[0]).cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let t = self.value(r);
            let single_row = (t.rank() == 1 && t.cols() == cols)
                || (t.rank() == 2 && t.shape() == [1, cols]);
            if !single_row {
                return Err(Error::Shape(format!(
                    "stack_rows: expected a single row of width {cols}, got {:?}",
                    t.shape()
                )));
            }
            out.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows.len(), cols, out)?;
        let op = Op::StackRows(rows.iter().map(|v| v.0).collect());
        self.push_checked(op, value, "stack_rows")
    }

    pub fn mean_rows(&mut self, src: Var) -> Result<Var> {
        let t = self.value(src);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "mean_rows needs a matrix, got {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j] += t.at(i, j);
            }
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        let value = Tensor::matrix(1, cols, out)?;
        self.push_checked(Op::MeanRows(src.0), value, "mean_rows")
    }

    pub fn sum_all(&mut self, src: Var) -> Result<Var> {
        let s: f64 = self.value(src).data().iter().sum();
        self.push_checked(Op::SumAll(src.0), Tensor::scalar(s), "sum_all")
    }

    pub fn mul_scalar(&mut self, src: Var, c: f64) -> Result<Var> {
        let data = self.value(src).data().iter().map(|v| v * c).collect();
        let value = Tensor::from_shape(self.value(src).shape().to_vec(), data)?;
        self.push_checked(Op::MulScalar(src.0, c), value, "mul_scalar")
    }

    pub fn add_scalar(&mut self, src: Var, c: f64) -> Result<Var> {
        let data = self.value(src).data().iter().map(|v| v + c).collect();
        let value = Tensor::from_shape(self.value(src).shape().to_vec(), data)?;
        self.push_checked(Op::AddScalar(src.0), value, "add_scalar")
    }

    pub fn neg(&mut self, src: Var) -> Result<Var> {
        self.mul_scalar(src, -1.0).map(|v| {
            // rewrite op kind so the tape reads naturally
            if let Some(node) = self.nodes.last_mut() {
                node.op = Op::Neg(src.0);
            }
            v
        })
    }

    pub fn exp(&mut self, src: Var) -> Result<Var> {
        let data = self.value(src).data().iter().map(|v| v.exp()).collect();
        let value = Tensor::from_shape(self.value(src).shape().to_vec(), data)?;
        self.push_checked(Op::Exp(src.0), value, "exp")
    }

    /// Elementwise `x^p` for `x >= 0`.
    pub fn pow_scalar(&mut self, src: Var, p: f64) -> Result<Var> {
        if self.value(src).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(
                "pow_scalar requires nonnegative inputs".into(),
            ));
        }
        let data = self.value(src).data().iter().map(|v| v.powf(p)).collect();
        let value = Tensor::from_shape(self.value(src).shape().to_vec(), data)?;
        self.push_checked(Op::PowScalar(src.0, p), value, "pow_scalar")
    }

    pub fn relu(&mut self, src: Var) -> Result<Var> {
        let data = self.value(src).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_shape(self.value(src).shape().to_vec(), data)?;
        self.push_checked(Op::Relu(src.0), value, "relu")
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, src: Var, axis: usize) -> Result<Var> {
        let t = self.value(src);
        let value = softmax_value(t, axis, false)?;
        self.push_checked(Op::Softmax { src: src.0, axis }, value, "softmax")
    }

    pub fn log_softmax(&mut self, src: Var, axis: usize) -> Result<Var> {
        let t = self.value(src);
        let value = softmax_value(t, axis, true)?;
        self.push_checked(Op::LogSoftmax { src: src.0, axis }, value, "log_softmax")
    }

    /// Normalization over the last axis followed by a per-column affine map.
    pub fn layer_norm(&mut self, src: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps {eps} must be > 0")));
        }
        let t = self.value(src);
        let cols = t.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs {cols} columns",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = t.rows();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &t.data()[i * cols..(i + 1) * cols];
            let (xhat, _, _) = normalize_row(row, eps);
            for j in 0..cols {
                out[i * cols + j] = xhat[j] * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_shape(t.shape().to_vec(), out)?;
        self.push_checked(
            Op::LayerNorm {
                src: src.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            value,
            "layer_norm",
        )
    }

    pub fn pick_per_row(&mut self, src: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "pick_per_row: {:?} with {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let cols = t.shape()[1];
        let mut out = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= cols {
                return Err(Error::Contract(format!(
                    "label {y} out of range for {cols} classes"
                )));
            }
            out.push(t.at(i, y));
        }
        let value = Tensor::vector(out);
        self.push_checked(
            Op::PickPerRow {
                src: src.0,
                labels: labels.to_vec(),
            },
            value,
            "pick_per_row",
        )
    }

    // ---- backward pass ----------------------------------------------------

    /// Accumulate `d root / d node` into every node's gradient buffer.
    /// `root` must be scalar-valued.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).rank() != 0 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root.0].grad[0] = 1.0;

        for idx in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = &node.grad;
            let val = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, n) = (val.shape()[0], val.shape()[1]);
                    let k = before[*a].value.shape()[1];
                    // dA += dC * B^T
                    {
                        let bdat: Vec<f64> = before[*b].value.data().to_vec();
                        let da = &mut before[*a].grad;
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                let grow = &g[i * n..(i + 1) * n];
                                let brow = &bdat[kk * n..(kk + 1) * n];
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                da[i * k + kk] += acc;
                            }
                        }
                    }
                    // dB += A^T * dC
                    {
                        let adat: Vec<f64> = before[*a].value.data().to_vec();
                        let db = &mut before[*b].grad;
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let aik = adat[i * k + kk];
                                if aik == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[kk * n..(kk + 1) * n];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += aik * gv;
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (val.shape()[0], val.shape()[1]);
                    let da = &mut before[*a].grad;
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] += g[i * n + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    if *a == *b {
                        for (dv, gv) in before[*a].grad.iter_mut().zip(g) {
                            *dv += 2.0 * gv;
                        }
                    } else {
                        let (x, y) = two_mut(before, *a, *b);
                        for (dv, gv) in x.grad.iter_mut().zip(g) {
                            *dv += gv;
                        }
                        for (dv, gv) in y.grad.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if *a == *b {
                        // gradient contributions cancel
                    } else {
                        let (x, y) = two_mut(before, *a, *b);
                        for (dv, gv) in x.grad.iter_mut().zip(g) {
                            *dv += gv;
                        }
                        for (dv, gv) in y.grad.iter_mut().zip(g) {
                            *dv -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if *a == *b {
                        let x = &mut before[*a];
                        let xv: Vec<f64> = x.value.data().to_vec();
                        for ((dv, gv), v) in x.grad.iter_mut().zip(g).zip(&xv) {
                            *dv += 2.0 * v * gv;
                        }
                    } else {
                        let bvals: Vec<f64> = before[*b].value.data().to_vec();
                        let avals: Vec<f64> = before[*a].value.data().to_vec();
                        for ((dv, gv), v) in before[*a].grad.iter_mut().zip(g).zip(&bvals) {
                            *dv += v * gv;
                        }
                        for ((dv, gv), v) in before[*b].grad.iter_mut().zip(g).zip(&avals) {
                            *dv += v * gv;
                        }
                    }
                }
                Op::AddRow(m_idx, r_idx) => {
                    let cols = val.shape()[1];
                    let rows = val.shape()[0];
                    let (mn, rn) = two_mut(before, *m_idx, *r_idx);
                    for (dv, gv) in mn.grad.iter_mut().zip(g) {
                        *dv += gv;
                    }
                    for i in 0..rows {
                        for j in 0..cols {
                            rn.grad[j] += g[i * cols + j];
                        }
                    }
                }
                Op::ScaleRows(m_idx, s_idx) => {
                    let cols = val.shape()[1];
                    let rows = val.shape()[0];
                    let svals: Vec<f64> = before[*s_idx].value.data().to_vec();
                    let mvals: Vec<f64> = before[*m_idx].value.data().to_vec();
                    {
                        let dm = &mut before[*m_idx].grad;
                        for i in 0..rows {
                            let s = svals[i];
                            for j in 0..cols {
                                dm[i * cols + j] += s * g[i * cols + j];
                            }
                        }
                    }
                    {
                        let ds = &mut before[*s_idx].grad;
                        for i in 0..rows {
                            let mut acc = 0.0;
                            for j in 0..cols {
                                acc += g[i * cols + j] * mvals[i * cols + j];
                            }
                            ds[i] += acc;
                        }
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let rows = val.shape()[0];
                    let src_cols = before[*src].value.shape()[1];
                    let ds = &mut before[*src].grad;
                    for i in 0..rows {
                        for j in 0..*len {
                            ds[i * src_cols + start + j] += g[i * len + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = val.shape()[0];
                    let total = val.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = before[p].value.shape()[1];
                        let dp = &mut before[p].grad;
                        for i in 0..rows {
                            for j in 0..c {
                                dp[i * c + j] += g[i * total + offset + j];
                            }
                        }
                        offset += c;
                    }
                    debug_assert_eq!(offset, total);
                }
                Op::StackRows(parts) => {
                    let cols = val.shape()[1];
                    for (i, &p) in parts.iter().enumerate() {
                        let dp = &mut before[p].grad;
                        for j in 0..cols {
                            dp[j] += g[i * cols + j];
                        }
                    }
                }
                Op::MeanRows(src) => {
                    let src_rows = before[*src].value.shape()[0];
                    let cols = val.shape()[1];
                    let inv = 1.0 / src_rows as f64;
                    let ds = &mut before[*src].grad;
                    for i in 0..src_rows {
                        for j in 0..cols {
                            ds[i * cols + j] += g[j] * inv;
                        }
                    }
                }
                Op::SumAll(src) => {
                    let gv = g[0];
                    for dv in before[*src].grad.iter_mut() {
                        *dv += gv;
                    }
                }
                Op::MulScalar(src, c) => {
                    for (dv, gv) in before[*src].grad.iter_mut().zip(g) {
                        *dv += c * gv;
                    }
                }
                Op::AddScalar(src) => {
                    for (dv, gv) in before[*src].grad.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                Op::Neg(src) => {
                    for (dv, gv) in before[*src].grad.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                }
                Op::Exp(src) => {
                    for ((dv, gv), yv) in before[*src].grad.iter_mut().zip(g).zip(val.data()) {
                        *dv += yv * gv;
                    }
                }
                Op::PowScalar(src, p) => {
                    let xv: Vec<f64> = before[*src].value.data().to_vec();
                    for ((dv, gv), x) in before[*src].grad.iter_mut().zip(g).zip(&xv) {
                        // subgradient 0 at the x = 0 boundary when p < 1
                        let d = if *x == 0.0 {
                            if *p >= 1.0 && *p != 1.0 {
                                0.0
                            } else if *p == 1.0 {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            p * x.powf(p - 1.0)
                        };
                        *dv += d * gv;
                    }
                }
                Op::Relu(src) => {
                    let xv: Vec<f64> = before[*src].value.data().to_vec();
                    for ((dv, gv), x) in before[*src].grad.iter_mut().zip(g).zip(&xv) {
                        if *x > 0.0 {
                            *dv += gv;
                        }
                    }
                }
                Op::Softmax { src, axis } => {
                    backprop_softmax(val, g, *axis, &mut before[*src].grad, false);
                }
                Op::LogSoftmax { src, axis } => {
                    backprop_softmax(val, g, *axis, &mut before[*src].grad, true);
                }
                Op::LayerNorm { src, gain, bias, eps } => {
                    let cols = val.cols();
                    let rows = val.rows();
                    let xvals: Vec<f64> = before[*src].value.data().to_vec();
                    let gvals: Vec<f64> = before[*gain].value.data().to_vec();
                    for i in 0..rows {
                        let row = &xvals[i * cols..(i + 1) * cols];
                        let (xhat, _, std) = normalize_row(row, *eps);
                        let grow = &g[i * cols..(i + 1) * cols];
                        // dgain, dbias
                        for j in 0..cols {
                            before[*gain].grad[j] += grow[j] * xhat[j];
                            before[*bias].grad[j] += grow[j];
                        }
                        // dx = (gy - mean(gy) - xhat * mean(gy * xhat)) / std
                        let gy: Vec<f64> =
                            (0..cols).map(|j| grow[j] * gvals[j]).collect();
                        let mean_gy: f64 = gy.iter().sum::<f64>() / cols as f64;
                        let mean_gy_xhat: f64 = gy
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / cols as f64;
                        let dsrc = &mut before[*src].grad;
                        for j in 0..cols {
                            dsrc[i * cols + j] +=
                                (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) / std;
                        }
                    }
                }
                Op::PickPerRow { src, labels } => {
                    let cols = before[*src].value.shape()[1];
                    let ds = &mut before[*src].grad;
                    for (i, &y) in labels.iter().enumerate() {
                        ds[i * cols + y] += g[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// `out += a * b` for row-major `a: m x k`, `b: k x n`.
fn matmul_accum(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (ov, bv) in orow.iter_mut().zip(brow) {
                *ov += aik * bv;
            }
        }
    }
}

/// Returns `(xhat, mean, std)` for one row, population variance plus eps.
fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = (var + eps).sqrt();
    let xhat = row.iter().map(|v| (v - mean) / std).collect();
    (xhat, mean, std)
}

fn softmax_value(t: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let rank = t.rank();
    if rank == 0 || axis >= rank {
        return Err(Error::Shape(format!(
            "softmax axis {axis} invalid for shape {:?}",
            t.shape()
        )));
    }
    let mut out = vec![0.0; t.len()];
    for_each_lane(t.shape(), axis, |stride, base, lanes| {
        let mut maxv = f64::NEG_INFINITY;
        for l in 0..lanes {
            maxv = maxv.max(t.data()[base + l * stride]);
        }
        let mut denom = 0.0;
        for l in 0..lanes {
            denom += (t.data()[base + l * stride] - maxv).exp();
        }
        for l in 0..lanes {
            let shifted = t.data()[base + l * stride] - maxv;
            out[base + l * stride] = if log {
                shifted - denom.ln()
            } else {
                shifted.exp() / denom
            };
        }
    });
    Tensor::from_shape(t.shape().to_vec(), out)
}

fn backprop_softmax(val: &Tensor, g: &[f64], axis: usize, dst: &mut [f64], log: bool) {
    for_each_lane(val.shape(), axis, |stride, base, lanes| {
        if log {
            // dx = g - softmax(x) * sum(g)
            let gsum: f64 = (0..lanes).map(|l| g[base + l * stride]).sum();
            for l in 0..lanes {
                let p = val.data()[base + l * stride].exp();
                dst[base + l * stride] += g[base + l * stride] - p * gsum;
            }
        } else {
            // dx = y * (g - sum(g * y))
            let dot: f64 = (0..lanes)
                .map(|l| g[base + l * stride] * val.data()[base + l * stride])
                .sum();
            for l in 0..lanes {
                let y = val.data()[base + l * stride];
                dst[base + l * stride] += y * (g[base + l * stride] - dot);
            }
        }
    });
}

/// Visit every 1-D lane along `axis`; `f(stride, base_offset, lane_len)`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    match shape.len() {
        1 => f(1, 0, shape[0]),
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            if axis == 1 {
                for i in 0..rows {
                    f(1, i * cols, cols);
                }
            } else {
                for j in 0..cols {
                    f(cols, j, rows);
                }
            }
        }
        _ => unreachable!("tensors are rank <= 2"),
    }
}

fn two_mut(nodes: &mut [Node], a: usize, b: usize) -> (&mut Node, &mut Node) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = nodes.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Central finite differences of `f` at `x`.
    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let id = g.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = g.matmul(id, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_value() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[2, 3]));
        let m = g.leaf(Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 9.0, 3.0, 4.0]).unwrap());
        let out = g.matmul(z, m).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0_f64.ln(), 3.0_f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        assert!(close(g.value(s).data()[0], 0.25, 1e-12));
        assert!(close(g.value(s).data()[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1000.0, 1000.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::matrix(2, 3, vec![0.3, -400.0, 999.0, 7.0, 7.0, -7.0]).unwrap(),
        );
        let s = g.softmax(x, 1).unwrap();
        for i in 0..2 {
            let sum: f64 = g.value(s).row(i).iter().sum();
            assert!(close(sum, 1.0, 1e-12));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
        let gain = g.leaf(Tensor::vector(vec![1.0; 4]));
        let bias = g.leaf(Tensor::vector(vec![0.0; 4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_closed_form() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let gain = g.leaf(Tensor::vector(vec![1.0, 1.0]));
        let bias = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(close(g.value(y).data()[0], -1.0, 1e-6));
        assert!(close(g.value(y).data()[1], 1.0, 1e-6));
    }

    #[test]
    fn layer_norm_zero_gain_broadcasts_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap());
        let gain = g.leaf(Tensor::vector(vec![0.0; 3]));
        let bias = g.leaf(Tensor::vector(vec![0.7, -0.1, 4.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for i in 0..2 {
            assert_eq!(g.value(y).row(i), &[0.7, -0.1, 4.0]);
        }
    }

    #[test]
    fn layer_norm_row_stats() {
        // normalized output (gain 1, bias 0) has mean ~0 and variance ~1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 5, vec![0.3, -2.0, 4.5, 1.1, 0.0]).unwrap());
        let gain = g.leaf(Tensor::vector(vec![1.0; 5]));
        let bias = g.leaf(Tensor::vector(vec![0.0; 5]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let row = g.value(y).row(0);
        let mean: f64 = row.iter().sum::<f64>() / 5.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_linear_case() {
        // root = sum(w * x); d root / d w = x
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let x = g.leaf(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let prod = g.mul(w, x).unwrap();
        let root = g.sum_all(prod).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(w).data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn backward_square_closed_form() {
        // root = sum(x^2) at x = [1, 2] -> grad [2, 4]
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let root = g.sum_all(sq).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_additive_over_independent_subgraphs() {
        let xv = vec![0.4, -0.7];
        let yv = vec![1.3, 0.2];
        // combined graph
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(xv.clone()));
        let y = g.leaf(Tensor::vector(yv.clone()));
        let sx = g.mul(x, x).unwrap();
        let sx = g.sum_all(sx).unwrap();
        let ey = g.exp(y).unwrap();
        let sy = g.sum_all(ey).unwrap();
        let root = g.add(sx, sy).unwrap();
        g.backward(root).unwrap();
        let gx = g.grad(x);
        let gy = g.grad(y);
        // separate graphs
        let mut g1 = Graph::new();
        let x1 = g1.leaf(Tensor::vector(xv));
        let sx1 = g1.mul(x1, x1).unwrap();
        let r1 = g1.sum_all(sx1).unwrap();
        g1.backward(r1).unwrap();
        let mut g2 = Graph::new();
        let y2 = g2.leaf(Tensor::vector(yv));
        let ey2 = g2.exp(y2).unwrap();
        let r2 = g2.sum_all(ey2).unwrap();
        g2.backward(r2).unwrap();
        assert_eq!(gx.data(), g1.grad(x1).data());
        assert_eq!(gy.data(), g2.grad(y2).data());
    }

    /// A messy composition of most ops, checked against finite differences.
    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);

        let eval = |x: &[f64]| -> f64 {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::matrix(2, 3, x[..6].to_vec()).unwrap());
            let b = g.leaf(Tensor::matrix(3, 2, x[6..12].to_vec()).unwrap());
            let gain = g.leaf(Tensor::vector(x[12..14].to_vec()));
            let bias = g.leaf(Tensor::vector(x[14..16].to_vec()));
            let m = g.matmul(a, b).unwrap();
            let ln = g.layer_norm(m, gain, bias, 1e-5).unwrap();
            let sm = g.softmax(ln, 1).unwrap();
            let lg = g.log_softmax(m, 1).unwrap();
            let mixed = g.add(sm, lg).unwrap();
            let r = g.relu(mixed).unwrap();
            let e = g.exp(ln).unwrap();
            let prod = g.mul(r, e).unwrap();
            let pooled = g.mean_rows(prod).unwrap();
            let t = g.transpose(pooled).unwrap();
            let flat = g.sum_all(t).unwrap();
            g.value(flat).item().unwrap()
        };

        for _ in 0..5 {
            let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fd = finite_diff(&eval, &x, 1e-5);

            let mut g = Graph::new();
            let a = g.leaf(Tensor::matrix(2, 3, x[..6].to_vec()).unwrap());
            let b = g.leaf(Tensor::matrix(3, 2, x[6..12].to_vec()).unwrap());
            let gain = g.leaf(Tensor::vector(x[12..14].to_vec()));
            let bias = g.leaf(Tensor::vector(x[14..16].to_vec()));
            let m = g.matmul(a, b).unwrap();
            let ln = g.layer_norm(m, gain, bias, 1e-5).unwrap();
            let sm = g.softmax(ln, 1).unwrap();
            let lg = g.log_softmax(m, 1).unwrap();
            let mixed = g.add(sm, lg).unwrap();
            let r = g.relu(mixed).unwrap();
            let e = g.exp(ln).unwrap();
            let prod = g.mul(r, e).unwrap();
            let pooled = g.mean_rows(prod).unwrap();
            let t = g.transpose(pooled).unwrap();
            let root = g.sum_all(t).unwrap();
            g.backward(root).unwrap();

            let mut ad = Vec::new();
            ad.extend_from_slice(g.grad(a).data());
            ad.extend_from_slice(g.grad(b).data());
            ad.extend_from_slice(g.grad(gain).data());
            ad.extend_from_slice(g.grad(bias).data());

            for (got, want) in ad.iter().zip(&fd) {
                assert!(
                    rel_err(*got, *want) < 1e-4,
                    "autodiff {got} vs finite diff {want}"
                );
            }
        }
    }

    #[test]
    fn pick_per_row_and_stack() {
        let mut g = Graph::new();
        let r0 = g.leaf(Tensor::matrix(1, 2, vec![0.1, 0.9]).unwrap());
        let r1 = g.leaf(Tensor::matrix(1, 2, vec![0.8, 0.2]).unwrap());
        let stacked = g.stack_rows(&[r0, r1]).unwrap();
        let picked = g.pick_per_row(stacked, &[1, 0]).unwrap();
        assert_eq!(g.value(picked).data(), &[0.9, 0.8]);
        let root = g.sum_all(picked).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(r0).data(), &[0.0, 1.0]);
        assert_eq!(g.grad(r1).data(), &[1.0, 0.0]);
    }

    #[test]
    fn pick_per_row_label_out_of_range() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::matrix(1, 2, vec![0.1, 0.9]).unwrap());
        assert!(g.pick_per_row(m, &[2]).is_err());
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::matrix(2, 4, (0..8).map(f64::from).collect()).unwrap());
        let a = g.slice_cols(m, 0, 2).unwrap();
        let b = g.slice_cols(m, 2, 2).unwrap();
        let back = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(back).data(), g.value(m).data());
    }
}
