//! Reverse-mode autodiff over [`Mat`] values.
//!
//! A `Graph` is a define-by-run tape: every builder method computes its value
//! immediately and records enough to replay the chain rule backwards. The op
//! set is exactly what the encoders and losses need; each op's backward is
//! verified against central finite differences in the tests below.

use std::rc::Rc;

use crate::error::{MamaError, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Boolean mask with the same shape as the node it applies to.
/// `false` entries are excluded from softmax normalization.
pub type Mask = Rc<Vec<bool>>;

enum Op {
    Input,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Recip(NodeId),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    StackRows(Vec<NodeId>),
    StackScalars(Vec<NodeId>),
    GatherRows(NodeId, Rc<Vec<usize>>),
    RowsMean(NodeId, Rc<Vec<usize>>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // per-row (mean, inv_std) saved from forward
        stats: Vec<(f64, f64)>,
    },
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId, Option<Mask>),
    L2NormRows(NodeId, Vec<f64>),
    RowMax(NodeId, Vec<usize>),
    ColMax(NodeId, Vec<usize>),
    Transpose(NodeId),
    RowDot(NodeId, NodeId),
    SetDiag(NodeId, NodeId),
    DiagMean(NodeId, usize),
    MeanAll(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn of(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }
}

const LN_EPS: f64 = 1e-5;

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// A B^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Matrix plus a (1, n) row vector added to every row.
    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.value(a);
        let r = self.value(b);
        assert_eq!(r.rows(), 1, "broadcast row must be (1, n)");
        assert_eq!(m.cols(), r.cols(), "broadcast width");
        let mut v = m.clone();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += y;
            }
        }
        self.push(v, Op::AddRowBroadcast(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Hadamard(a, b))
    }

    /// Every entry of `a` multiplied by the 1x1 node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).shape(), (1, 1), "scalar node");
        let c = self.value(s).item();
        let v = self.value(a).scale(c);
        self.push(v, Op::MulScalar(a, s))
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = Mat::from_vec(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a).data().iter().map(|x| 1.0 / x).collect(),
        );
        self.push(v, Op::Recip(a))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = Mat::vstack(&[self.value(a), self.value(b)]);
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows(), mb.rows(), "concat_cols row counts");
        let mut v = Mat::zeros(ma.rows(), ma.cols() + mb.cols());
        for i in 0..ma.rows() {
            v.row_mut(i)[..ma.cols()].copy_from_slice(ma.row(i));
            v.row_mut(i)[ma.cols()..].copy_from_slice(mb.row(i));
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    /// Stack (1, n) nodes into a (k, n) matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let refs: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        for r in &refs {
            assert_eq!(r.rows(), 1, "stack_rows expects row vectors");
        }
        let v = Mat::vstack(&refs);
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    /// Arrange rows*cols scalar nodes into a (rows, cols) matrix, row-major.
    pub fn stack_scalars(&mut self, parts: &[NodeId], rows: usize, cols: usize) -> NodeId {
        assert_eq!(parts.len(), rows * cols, "stack_scalars count");
        let data = parts.iter().map(|&p| self.value(p).item()).collect();
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::StackScalars(parts.to_vec()),
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a).gather_rows(idx);
        self.push(v, Op::GatherRows(a, Rc::new(idx.to_vec())))
    }

    /// Mean of a subset of rows, result (1, n).
    pub fn rows_mean(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        assert!(!idx.is_empty(), "rows_mean over empty subset");
        let m = self.value(a);
        let mut v = Mat::zeros(1, m.cols());
        for &i in idx {
            for (o, &x) in v.row_mut(0).iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        for o in v.data_mut() {
            *o *= inv;
        }
        self.push(v, Op::RowsMean(a, Rc::new(idx.to_vec())))
    }

    /// Per-row layer normalization with learnable (1, n) gamma and beta.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let m = self.value(x);
        let (rows, cols) = m.shape();
        assert_eq!(self.value(gamma).shape(), (1, cols));
        assert_eq!(self.value(beta).shape(), (1, cols));
        let mut v = Mat::zeros(rows, cols);
        let mut stats = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = m.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            stats.push((mean, inv_std));
            let g = self.nodes[gamma.0].value.row(0);
            let b = self.nodes[beta.0].value.row(0);
            for j in 0..cols {
                v.set(i, j, (row[j] - mean) * inv_std * g[j] + b[j]);
            }
        }
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let v = Mat::from_vec(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&x| gelu(x)).collect(),
        );
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise softmax with max-subtraction. Masked-out entries get
    /// probability zero and are excluded from normalization.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<Mask>) -> NodeId {
        let v = softmax_forward(self.value(a), mask.as_deref(), false);
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise log-softmax (max-subtracted). Masked entries output 0 and
    /// receive no gradient; callers must not read them.
    pub fn log_softmax_rows(&mut self, a: NodeId, mask: Option<Mask>) -> NodeId {
        let v = softmax_forward(self.value(a), mask.as_deref(), true);
        self.push(v, Op::LogSoftmaxRows(a, mask))
    }

    /// Normalize every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        let mut v = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let n = m.row_norm(i);
            if n <= 0.0 || !n.is_finite() {
                return Err(MamaError::Numeric(format!(
                    "cannot normalize row {i}: norm {n}"
                )));
            }
            norms.push(n);
            for x in v.row_mut(i) {
                *x /= n;
            }
        }
        Ok(self.push(v, Op::L2NormRows(a, norms)))
    }

    /// Max over each row, result (m, 1).
    pub fn row_max(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut v = Mat::zeros(m.rows(), 1);
        let mut arg = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let (j, &x) = m
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            v.set(i, 0, x);
            arg.push(j);
        }
        self.push(v, Op::RowMax(a, arg))
    }

    /// Max over each column, result (1, n).
    pub fn col_max(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut v = Mat::zeros(1, m.cols());
        let mut arg = vec![0usize; m.cols()];
        for j in 0..m.cols() {
            let mut best = f64::NEG_INFINITY;
            for i in 0..m.rows() {
                if m.at(i, j) > best {
                    best = m.at(i, j);
                    arg[j] = i;
                }
            }
            v.set(0, j, best);
        }
        self.push(v, Op::ColMax(a, arg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Row-wise dot product of two equal-shape matrices, result (m, 1).
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "row_dot shapes");
        let mut v = Mat::zeros(ma.rows(), 1);
        for i in 0..ma.rows() {
            v.set(i, 0, crate::mat::dot(ma.row(i), mb.row(i)));
        }
        self.push(v, Op::RowDot(a, b))
    }

    /// Replace the diagonal of square `a` with the (m, 1) node `d`.
    pub fn set_diag(&mut self, a: NodeId, d: NodeId) -> NodeId {
        let m = self.value(a);
        assert_eq!(m.rows(), m.cols(), "set_diag on square matrix");
        assert_eq!(self.value(d).shape(), (m.rows(), 1));
        let mut v = m.clone();
        for i in 0..v.rows() {
            let x = self.nodes[d.0].value.at(i, 0);
            v.set(i, i, x);
        }
        self.push(v, Op::SetDiag(a, d))
    }

    /// Mean of entries a[i, i + col_offset] for every row i, result 1x1.
    pub fn diag_mean(&mut self, a: NodeId, col_offset: usize) -> NodeId {
        let m = self.value(a);
        assert!(m.cols() >= m.rows() + col_offset, "diag_mean bounds");
        let s: f64 = (0..m.rows()).map(|i| m.at(i, i + col_offset)).sum();
        self.push(
            Mat::scalar(s / m.rows() as f64),
            Op::DiagMean(a, col_offset),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let s: f64 = m.data().iter().sum();
        self.push(Mat::scalar(s / m.len() as f64), Op::MeanAll(a))
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate_parents(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], target: NodeId, delta: Mat| match &mut grads[target.0]
        {
            Some(existing) => existing.add_assign(&delta),
            slot => *slot = Some(delta),
        };
        match &self.nodes[id].op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(grads, *a, g.matmul_nt(vb));
                acc(grads, *b, va.matmul_tn(g));
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(grads, *a, g.matmul(vb));
                acc(grads, *b, g.matmul_tn(va));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRowBroadcast(a, b) => {
                acc(grads, *a, g.clone());
                let mut db = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &x) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(grads, *b, db);
            }
            Op::Scale(a, c) => acc(grads, *a, g.scale(*c)),
            Op::Hadamard(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(grads, *a, g.hadamard(vb));
                acc(grads, *b, g.hadamard(va));
            }
            Op::MulScalar(a, s) => {
                let va = &self.nodes[a.0].value;
                let sv = self.nodes[s.0].value.item();
                acc(grads, *a, g.scale(sv));
                let ds: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                acc(grads, *s, Mat::scalar(ds));
            }
            Op::Recip(a) => {
                let y = &self.nodes[id].value;
                let d = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gx, yx)| -gx * yx * yx)
                        .collect(),
                );
                acc(grads, *a, d);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.nodes[a.0].value.rows();
                let mut da = Mat::zeros(ra, g.cols());
                let mut db = Mat::zeros(g.rows() - ra, g.cols());
                for i in 0..g.rows() {
                    if i < ra {
                        da.row_mut(i).copy_from_slice(g.row(i));
                    } else {
                        db.row_mut(i - ra).copy_from_slice(g.row(i));
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.cols();
                let mut da = Mat::zeros(g.rows(), ca);
                let mut db = Mat::zeros(g.rows(), g.cols() - ca);
                for i in 0..g.rows() {
                    da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::StackRows(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    let mut d = Mat::zeros(1, g.cols());
                    d.row_mut(0).copy_from_slice(g.row(i));
                    acc(grads, p, d);
                }
            }
            Op::StackScalars(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    acc(grads, p, Mat::scalar(g.data()[i]));
                }
            }
            Op::GatherRows(a, idx) => {
                let va = &self.nodes[a.0].value;
                let mut d = Mat::zeros(va.rows(), va.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(grads, *a, d);
            }
            Op::RowsMean(a, idx) => {
                let va = &self.nodes[a.0].value;
                let mut d = Mat::zeros(va.rows(), va.cols());
                let inv = 1.0 / idx.len() as f64;
                for &i in idx.iter() {
                    for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o += x * inv;
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gamma.0].value;
                let (rows, cols) = vx.shape();
                let mut dx = Mat::zeros(rows, cols);
                let mut dgamma = Mat::zeros(1, cols);
                let mut dbeta = Mat::zeros(1, cols);
                for i in 0..rows {
                    let (mean, inv_std) = stats[i];
                    let row = vx.row(i);
                    let grow = g.row(i);
                    // xhat, gy and its row statistics
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    let mut xhat = vec![0.0; cols];
                    let mut gy = vec![0.0; cols];
                    for j in 0..cols {
                        xhat[j] = (row[j] - mean) * inv_std;
                        gy[j] = grow[j] * vg.at(0, j);
                        sum_gy += gy[j];
                        sum_gy_xhat += gy[j] * xhat[j];
                        dgamma.row_mut(0)[j] += grow[j] * xhat[j];
                        dbeta.row_mut(0)[j] += grow[j];
                    }
                    let n = cols as f64;
                    for j in 0..cols {
                        dx.set(
                            i,
                            j,
                            inv_std * (gy[j] - sum_gy / n - xhat[j] * sum_gy_xhat / n),
                        );
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Gelu(a) => {
                let va = &self.nodes[a.0].value;
                let d = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gx, &x)| gx * gelu_grad(x))
                        .collect(),
                );
                acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let p = &self.nodes[id].value;
                let mut d = Mat::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = g.row(i).iter().zip(p.row(i)).map(|(x, y)| x * y).sum();
                    for j in 0..g.cols() {
                        d.set(i, j, p.at(i, j) * (g.at(i, j) - dot));
                    }
                }
                acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a, mask) => {
                let va = &self.nodes[a.0].value;
                let p = softmax_forward(va, mask.as_deref(), false);
                let mut d = Mat::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    for j in 0..g.cols() {
                        let masked = mask.as_deref().is_some_and(|m| !m[i * g.cols() + j]);
                        if !masked {
                            d.set(i, j, g.at(i, j) - p.at(i, j) * gsum);
                        }
                    }
                }
                acc(grads, *a, d);
            }
            Op::L2NormRows(a, norms) => {
                let y = &self.nodes[id].value;
                let mut d = Mat::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let gy: f64 = g.row(i).iter().zip(y.row(i)).map(|(x, v)| x * v).sum();
                    for j in 0..g.cols() {
                        d.set(i, j, (g.at(i, j) - gy * y.at(i, j)) / norms[i]);
                    }
                }
                acc(grads, *a, d);
            }
            Op::RowMax(a, arg) => {
                let va = &self.nodes[a.0].value;
                let mut d = Mat::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    d.set(i, arg[i], g.at(i, 0));
                }
                acc(grads, *a, d);
            }
            Op::ColMax(a, arg) => {
                let va = &self.nodes[a.0].value;
                let mut d = Mat::zeros(va.rows(), va.cols());
                for j in 0..va.cols() {
                    d.set(arg[j], j, g.at(0, j));
                }
                acc(grads, *a, d);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::RowDot(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let mut da = Mat::zeros(va.rows(), va.cols());
                let mut db = Mat::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let gi = g.at(i, 0);
                    for j in 0..va.cols() {
                        da.set(i, j, gi * vb.at(i, j));
                        db.set(i, j, gi * va.at(i, j));
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::SetDiag(a, dvec) => {
                let mut da = g.clone();
                let mut dd = Mat::zeros(g.rows(), 1);
                for i in 0..g.rows() {
                    dd.set(i, 0, g.at(i, i));
                    da.set(i, i, 0.0);
                }
                acc(grads, *a, da);
                acc(grads, *dvec, dd);
            }
            Op::DiagMean(a, off) => {
                let va = &self.nodes[a.0].value;
                let mut d = Mat::zeros(va.rows(), va.cols());
                let gv = g.item() / va.rows() as f64;
                for i in 0..va.rows() {
                    d.set(i, i + off, gv);
                }
                acc(grads, *a, d);
            }
            Op::MeanAll(a) => {
                let va = &self.nodes[a.0].value;
                let gv = g.item() / va.len() as f64;
                acc(
                    grads,
                    *a,
                    Mat::from_vec(va.rows(), va.cols(), vec![gv; va.len()]),
                );
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_forward(m: &Mat, mask: Option<&Vec<bool>>, log: bool) -> Mat {
    let (rows, cols) = m.shape();
    if let Some(mask) = mask {
        assert_eq!(mask.len(), rows * cols, "mask shape");
    }
    let mut out = Mat::zeros(rows, cols);
    for i in 0..rows {
        let live = |j: usize| mask.is_none_or(|m| m[i * cols + j]);
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if live(j) && m.at(i, j) > max {
                max = m.at(i, j);
            }
        }
        assert!(
            max.is_finite(),
            "softmax row {i} has no live entries or non-finite input"
        );
        let mut denom = 0.0;
        for j in 0..cols {
            if live(j) {
                denom += (m.at(i, j) - max).exp();
            }
        }
        let log_denom = denom.ln();
        for j in 0..cols {
            if live(j) {
                let shifted = m.at(i, j) - max;
                if log {
                    out.set(i, j, shifted - log_denom);
                } else {
                    out.set(i, j, shifted.exp() / denom);
                }
            }
        }
    }
    out
}

/// Finite-difference helpers shared by unit and acceptance tests.
pub mod gradcheck {
    /// Relative error with an absolute floor for near-zero gradients.
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-8 {
            return (analytic - numeric).abs();
        }
        (analytic - numeric).abs() / scale
    }

    /// Central difference of `f` along coordinate `i` of `x`.
    pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * h)
    }
}
