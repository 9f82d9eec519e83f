//! Reverse-mode gradient engine over [`Matrix`] values.
//!
//! Operations append nodes to a tape; parents always precede children, so the
//! tape order is a topological order and the backward pass is a single
//! reverse scan seeded at a scalar root. Each node owns its value and a
//! zero-initialized gradient of the same shape.

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// rows of `a` plus the single row `b`
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Transpose(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanRows(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    L2NormalizeRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    GatherRows { x: NodeId, rows: Vec<usize> },
    ReplaceRows { x: NodeId, replacement: NodeId, rows: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    GatherCols2d { x: NodeId, index: Vec<Vec<usize>> },
    PickEntries { x: NodeId, cols: Vec<usize> },
    Im2Col { x: NodeId, kernel: usize, stride: usize },
}

#[derive(Debug)]
pub struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
}

/// Forward tape plus gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf node (input or trainable parameter).
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Broadcast-add a 1 x D row to every row of `a` (bias add).
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (bm, am) = (self.value(b), self.value(a));
        if bm.rows() != 1 || bm.cols() != am.cols() {
            return Err(Error::Dimension(format!(
                "add_row: {}x{} + {}x{}",
                am.rows(),
                am.cols(),
                bm.rows(),
                bm.cols()
            )));
        }
        let mut v = am.clone();
        for i in 0..v.rows() {
            let brow = self.value(b).row(0).to_vec();
            for (o, bv) in v.row_mut(i).iter_mut().zip(&brow) {
                *o += bv;
            }
        }
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).add_scalar(s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).mean());
        self.push(v, Op::MeanAll(a))
    }

    /// Column means: T x D -> 1 x D.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).col_means();
        self.push(v, Op::MeanRows(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Exponent terms are accumulated in ascending order, so the row result
    /// is invariant to permutations of the row (candidate-order invariance).
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut v = m.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut terms: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lse = mx + terms.iter().sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Normalize each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        let mut v = m.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("l2_normalize_rows: zero row {i}")));
            }
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        Ok(self.push(v, Op::L2NormalizeRows(a)))
    }

    /// Row-wise layer normalization with learned gain/bias (both 1 x D).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xm = self.value(x);
        let d = xm.cols();
        if self.value(gain).shape() != (1, d) || self.value(bias).shape() != (1, d) {
            return Err(Error::Dimension("layer_norm: gain/bias must be 1 x D".into()));
        }
        let gain_row = self.value(gain).row(0).to_vec();
        let bias_row = self.value(bias).row(0).to_vec();
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / d as f64;
            let sd = (var + eps).sqrt();
            for (j, a) in row.iter_mut().enumerate() {
                *a = (*a - mu) / sd * gain_row[j] + bias_row[j];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let xm = self.value(x);
        let mut v = Matrix::zeros(rows.len(), xm.cols());
        for (k, &r) in rows.iter().enumerate() {
            if r >= xm.rows() {
                return Err(Error::Dimension(format!("gather_rows: row {r} out of {}", xm.rows())));
            }
            v.row_mut(k).copy_from_slice(self.value(x).row(r));
        }
        Ok(self.push(v, Op::GatherRows { x, rows }))
    }

    /// Overwrite the given rows of `x` with a single learned 1 x D row.
    pub fn replace_rows(&mut self, x: NodeId, replacement: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (xr, xc) = self.value(x).shape();
        if self.value(replacement).shape() != (1, xc) {
            return Err(Error::Dimension("replace_rows: replacement must be 1 x D".into()));
        }
        let mut v = self.value(x).clone();
        let rep = self.value(replacement).row(0).to_vec();
        for &r in &rows {
            if r >= xr {
                return Err(Error::Dimension(format!("replace_rows: row {r} out of {xr}")));
            }
            v.row_mut(r).copy_from_slice(&rep);
        }
        Ok(self.push(v, Op::ReplaceRows { x, replacement, rows }))
    }

    /// Contiguous column slice.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xm = self.value(x);
        if start + len > xm.cols() {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {}) out of {} cols",
                start + len,
                xm.cols()
            )));
        }
        let mut v = Matrix::zeros(xm.rows(), len);
        for i in 0..xm.rows() {
            let src = &self.value(x).row(i)[start..start + len];
            v.row_mut(i).copy_from_slice(src);
        }
        Ok(self.push(v, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols: no parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            if pm.rows() != rows {
                return Err(Error::Dimension("concat_cols: row counts differ".into()));
            }
            let c = pm.cols();
            for i in 0..rows {
                let src = self.value(p).row(i).to_vec();
                v.row_mut(i)[off..off + c].copy_from_slice(&src);
            }
            off += c;
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// out[i][j] = x[i][index[i][j]] — per-row column gather.
    pub fn gather_cols_2d(&mut self, x: NodeId, index: Vec<Vec<usize>>) -> Result<NodeId> {
        let xm = self.value(x);
        if index.len() != xm.rows() {
            return Err(Error::Dimension("gather_cols_2d: index rows mismatch".into()));
        }
        let width = index.first().map_or(0, |r| r.len());
        let mut v = Matrix::zeros(xm.rows(), width);
        for (i, idx_row) in index.iter().enumerate() {
            if idx_row.len() != width {
                return Err(Error::Dimension("gather_cols_2d: ragged index".into()));
            }
            for (j, &c) in idx_row.iter().enumerate() {
                if c >= xm.cols() {
                    return Err(Error::Dimension(format!(
                        "gather_cols_2d: col {c} out of {}",
                        xm.cols()
                    )));
                }
                v.set(i, j, xm.get(i, c));
            }
        }
        Ok(self.push(v, Op::GatherCols2d { x, index }))
    }

    /// out[i][0] = x[i][cols[i]] — one entry per row.
    pub fn pick_entries(&mut self, x: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let xm = self.value(x);
        if cols.len() != xm.rows() {
            return Err(Error::Dimension("pick_entries: needs one column per row".into()));
        }
        let mut v = Matrix::zeros(xm.rows(), 1);
        for (i, &c) in cols.iter().enumerate() {
            if c >= xm.cols() {
                return Err(Error::Dimension(format!("pick_entries: col {c} out of {}", xm.cols())));
            }
            v.set(i, 0, xm.get(i, c));
        }
        Ok(self.push(v, Op::PickEntries { x, cols }))
    }

    /// Unroll sliding windows for a strided 1-D convolution.
    ///
    /// x is T x C (frames by channels); output is T_out x (kernel*C) with
    /// out[t][j*C + c] = x[t*stride + j][c], T_out = (T - kernel)/stride + 1.
    pub fn im2col(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let xm = self.value(x);
        let (t, c) = xm.shape();
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("im2col: kernel and stride must be positive".into()));
        }
        if t < kernel {
            return Err(Error::Dimension(format!("im2col: {t} frames < kernel {kernel}")));
        }
        let t_out = (t - kernel) / stride + 1;
        let mut v = Matrix::zeros(t_out, kernel * c);
        for ti in 0..t_out {
            for j in 0..kernel {
                let src = self.value(x).row(ti * stride + j).to_vec();
                v.row_mut(ti)[j * c..(j + 1) * c].copy_from_slice(&src);
            }
        }
        Ok(self.push(v, Op::Im2Col { x, kernel, stride }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate d(root)/d(ancestor) into every ancestor's grad.
    /// The root must be scalar-valued (1 x 1).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).shape() != (1, 1) {
            let (r, c) = self.value(root).shape();
            return Err(Error::Contract(format!("backward root must be 1x1, got {r}x{c}")));
        }
        self.nodes[root.0].grad = Matrix::filled(1, 1, 1.0);
        for i in (0..=root.0).rev() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let contribs = self.contributions(i, &op)?;
            for (pid, c) in contribs {
                self.nodes[pid.0].grad.add_assign(&c)?;
            }
        }
        Ok(())
    }

    /// Parent gradient contributions of node `i` given its upstream grad.
    fn contributions(&self, i: usize, op: &Op) -> Result<Vec<(NodeId, Matrix)>> {
        let g = &self.nodes[i].grad;
        let out = &self.nodes[i].value;
        let v = |id: NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) => vec![
                (*a, g.matmul_nt(v(*b))?),
                (*b, v(*a).matmul_tn(g)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, b) => {
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Hadamard(a, b) => vec![(*a, g.hadamard(v(*b))?), (*b, g.hadamard(v(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::SumAll(a) => {
                let (r, c) = v(*a).shape();
                vec![(*a, Matrix::filled(r, c, g.get(0, 0)))]
            }
            Op::MeanAll(a) => {
                let (r, c) = v(*a).shape();
                vec![(*a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64))]
            }
            Op::MeanRows(a) => {
                let (r, c) = v(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for ri in 0..r {
                    for (o, gv) in da.row_mut(ri).iter_mut().zip(g.row(0)) {
                        *o += gv / r as f64;
                    }
                }
                vec![(*a, da)]
            }
            Op::Gelu(a) => {
                let da = Matrix::from_fn(g.rows(), g.cols(), |ri, ci| {
                    g.get(ri, ci) * gelu_deriv(v(*a).get(ri, ci))
                });
                vec![(*a, da)]
            }
            Op::Exp(a) => vec![(*a, g.hadamard(out)?)],
            Op::Ln(a) => {
                let da = Matrix::from_fn(g.rows(), g.cols(), |ri, ci| {
                    g.get(ri, ci) / v(*a).get(ri, ci)
                });
                vec![(*a, da)]
            }
            Op::SoftmaxRows(a) => {
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for ri in 0..g.rows() {
                    let srow = out.row(ri);
                    let grow = g.row(ri);
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                    for (j, o) in da.row_mut(ri).iter_mut().enumerate() {
                        *o = srow[j] * (grow[j] - dot);
                    }
                }
                vec![(*a, da)]
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for ri in 0..g.rows() {
                    let gsum: f64 = g.row(ri).iter().sum();
                    for (j, o) in da.row_mut(ri).iter_mut().enumerate() {
                        // softmax = exp(log_softmax)
                        *o = g.get(ri, j) - out.get(ri, j).exp() * gsum;
                    }
                }
                vec![(*a, da)]
            }
            Op::L2NormalizeRows(a) => {
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for ri in 0..g.rows() {
                    let xrow = v(*a).row(ri);
                    let yrow = out.row(ri);
                    let n = xrow.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let ydotg: f64 = yrow.iter().zip(g.row(ri)).map(|(y, gv)| y * gv).sum();
                    for (j, o) in da.row_mut(ri).iter_mut().enumerate() {
                        *o = (g.get(ri, j) - yrow[j] * ydotg) / n;
                    }
                }
                vec![(*a, da)]
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xm = v(*x);
                let d = xm.cols();
                let gain_row = v(*gain).row(0);
                let mut dx = Matrix::zeros(xm.rows(), d);
                let mut dgain = Matrix::zeros(1, d);
                let mut dbias = Matrix::zeros(1, d);
                for ri in 0..xm.rows() {
                    let xrow = xm.row(ri);
                    let mu = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / d as f64;
                    let sd = (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|a| (a - mu) / sd).collect();
                    let grow = g.row(ri);
                    let h: Vec<f64> = grow.iter().zip(gain_row).map(|(gv, ga)| gv * ga).collect();
                    let h_mean = h.iter().sum::<f64>() / d as f64;
                    let hx_mean = h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx.set(ri, j, (h[j] - h_mean - xhat[j] * hx_mean) / sd);
                        dgain.set(0, j, dgain.get(0, j) + grow[j] * xhat[j]);
                        dbias.set(0, j, dbias.get(0, j) + grow[j]);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::GatherRows { x, rows } => {
                let mut dx = Matrix::zeros(v(*x).rows(), v(*x).cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, gv) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                vec![(*x, dx)]
            }
            Op::ReplaceRows { x, replacement, rows } => {
                let mut dx = g.clone();
                let mut drep = Matrix::zeros(1, g.cols());
                for &r in rows {
                    for (o, gv) in drep.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                    dx.row_mut(r).fill(0.0);
                }
                vec![(*x, dx), (*replacement, drep)]
            }
            Op::SliceCols { x, start, len } => {
                let mut dx = Matrix::zeros(v(*x).rows(), v(*x).cols());
                for ri in 0..g.rows() {
                    for j in 0..*len {
                        dx.set(ri, start + j, g.get(ri, j));
                    }
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let mut res = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    let c = v(p).cols();
                    let mut dp = Matrix::zeros(g.rows(), c);
                    for ri in 0..g.rows() {
                        for j in 0..c {
                            dp.set(ri, j, g.get(ri, off + j));
                        }
                    }
                    res.push((p, dp));
                    off += c;
                }
                res
            }
            Op::GatherCols2d { x, index } => {
                let mut dx = Matrix::zeros(v(*x).rows(), v(*x).cols());
                for (ri, idx_row) in index.iter().enumerate() {
                    for (j, &c) in idx_row.iter().enumerate() {
                        dx.set(ri, c, dx.get(ri, c) + g.get(ri, j));
                    }
                }
                vec![(*x, dx)]
            }
            Op::PickEntries { x, cols } => {
                let mut dx = Matrix::zeros(v(*x).rows(), v(*x).cols());
                for (ri, &c) in cols.iter().enumerate() {
                    dx.set(ri, c, g.get(ri, 0));
                }
                vec![(*x, dx)]
            }
            Op::Im2Col { x, kernel, stride } => {
                let (t, c) = v(*x).shape();
                let mut dx = Matrix::zeros(t, c);
                for ti in 0..g.rows() {
                    for j in 0..*kernel {
                        let r = ti * stride + j;
                        for ci in 0..c {
                            dx.set(r, ci, dx.get(r, ci) + g.get(ti, j * c + ci));
                        }
                    }
                }
                vec![(*x, dx)]
            }
        })
    }
}

/// GELU with the tanh approximation (smooth everywhere, which keeps
/// finite-difference checks clean).
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
