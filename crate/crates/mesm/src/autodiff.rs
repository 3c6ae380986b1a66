//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records a DAG of primitive ops as the forward pass runs;
//! [`Tape::backward`] replays it in reverse, accumulating gradients into
//! every node. Masks, token ids, and other non-differentiable context live
//! inside the op, never as graph inputs.

use crate::tensor::Tensor;
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    /// Value copy that blocks gradient flow.
    Detach(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    /// matrix (l x d) + bias row (1 x d) broadcast over rows
    AddRowBroadcast(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Transpose(usize),
    /// Row-wise softmax over the columns flagged valid; invalid columns are
    /// exactly 0 in the output.
    MaskedSoftmaxRows(usize, Arc<Vec<bool>>),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    /// Mean over the rows flagged valid -> 1 x d.
    MaskedMeanRows(usize, Arc<Vec<bool>>),
    SumAll(usize),
    L2NormalizeRows { x: usize, eps: f64 },
    LogSoftmaxRows(usize),
    /// out[i] = -x[i, ids[i]] for a log-probability matrix x.
    NllRows(usize, Arc<Vec<usize>>),
    /// Per-row log-sum-exp over a row-specific column mask -> l x 1.
    MaskedLogSumExpRows(usize, Arc<Vec<Vec<bool>>>),
    Abs(usize),
    /// Mean binary cross-entropy over valid rows of a probability column.
    BceMasked { p: usize, labels: Arc<Vec<f64>>, mask: Arc<Vec<bool>> },
    /// Generalized IoU between a predicted (start, end) row and a fixed
    /// ground-truth interval -> 1 x 1.
    GiouSpan { pred: usize, gt: (f64, f64) },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor as a graph input. Gradients are accumulated for every
    /// leaf; callers decide which ones they read back.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::Detach(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.mul_elem(&self.nodes[b.0].value);
        self.push(value, Op::MulElem(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.scale(c);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let b = &self.nodes[bias.0].value;
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(m.cols(), b.cols(), "bias width mismatch");
        let mut value = m.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (x, &bv) in row.iter_mut().zip(b.data()) {
                *x += bv;
            }
        }
        self.push(value, Op::AddRowBroadcast(a.0, bias.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(sigmoid);
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transpose();
        self.push(value, Op::Transpose(a.0))
    }

    /// Softmax along each row, restricted to `mask`-valid columns. Rows sum
    /// to 1 over valid columns; invalid columns are exactly zero, so padded
    /// positions can never leak into attention output.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.cols(), mask.len(), "mask length mismatch");
        assert!(mask.iter().any(|&m| m), "softmax needs at least one valid column");
        let mut value = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, (&v, &m)) in row.iter().zip(mask.iter()).enumerate() {
                if m {
                    let e = (v - max).exp();
                    value.set(r, c, e);
                    denom += e;
                }
            }
            for c in 0..x.cols() {
                if mask[c] {
                    let v = value.get(r, c) / denom;
                    value.set(r, c, v);
                }
            }
        }
        self.push(value, Op::MaskedSoftmaxRows(a.0, mask))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        assert_eq!(g.cols(), xv.cols());
        assert_eq!(b.cols(), xv.cols());
        let mut value = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (mean, inv_std) = row_moments(row, eps);
            for (c, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * inv_std;
                value.set(r, c, g.data()[c] * xhat + b.data()[c]);
            }
        }
        self.push(value, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.cols(), bv.cols(), "concat_rows width mismatch");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::from_vec(av.rows() + bv.rows(), av.cols(), data);
        self.push(value, Op::ConcatRows(a.0, b.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.rows(), bv.rows(), "concat_cols height mismatch");
        let mut value = Tensor::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = value.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        self.push(value, Op::ConcatCols(a.0, b.0))
    }

    /// Stack a list of vars vertically.
    pub fn stack_rows(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.concat_rows(acc, v);
        }
        acc
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let cols = av.cols();
        let value = Tensor::from_vec(len, cols, av.data()[start * cols..(start + len) * cols].to_vec());
        self.push(value, Op::SliceRows { x: a.0, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x: a.0, start })
    }

    pub fn masked_mean_rows(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.rows(), mask.len(), "row mask length mismatch");
        let n = mask.iter().filter(|&&m| m).count();
        assert!(n > 0, "masked_mean_rows needs at least one valid row");
        let mut value = Tensor::zeros(1, av.cols());
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for (o, &v) in value.row_mut(0).iter_mut().zip(av.row(r)) {
                    *o += v;
                }
            }
        }
        for o in value.data_mut() {
            *o /= n as f64;
        }
        self.push(value, Op::MaskedMeanRows(a.0, mask))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = av.clone();
        for r in 0..value.rows() {
            let norm = row_norm(av.row(r)).max(eps);
            for v in value.row_mut(r) {
                *v /= norm;
            }
        }
        self.push(value, Op::L2NormalizeRows { x: a.0, eps })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for v in row {
                *v -= lse;
            }
        }
        self.push(value, Op::LogSoftmaxRows(a.0))
    }

    /// Negative log-likelihood per row of a log-probability matrix.
    pub fn nll_rows(&mut self, logp: Var, ids: Arc<Vec<usize>>) -> Var {
        let lv = &self.nodes[logp.0].value;
        assert_eq!(lv.rows(), ids.len(), "one target id per row");
        let mut value = Tensor::zeros(lv.rows(), 1);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < lv.cols(), "token id {id} outside vocabulary of {}", lv.cols());
            value.set(r, 0, -lv.get(r, id));
        }
        self.push(value, Op::NllRows(logp.0, ids))
    }

    pub fn masked_logsumexp_rows(&mut self, a: Var, masks: Arc<Vec<Vec<bool>>>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.rows(), masks.len(), "one mask per row");
        let mut value = Tensor::zeros(av.rows(), 1);
        for (r, mask) in masks.iter().enumerate() {
            assert_eq!(mask.len(), av.cols());
            let row = av.row(r);
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "log-sum-exp over an empty selection");
            let sum: f64 = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            value.set(r, 0, max + sum.ln());
        }
        self.push(value, Op::MaskedLogSumExpRows(a.0, masks))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::abs);
        self.push(value, Op::Abs(a.0))
    }

    /// Mean binary cross-entropy over valid rows. Probabilities are clamped
    /// to `[1e-7, 1 - 1e-7]` so the loss stays finite at saturation.
    pub fn bce_masked(&mut self, p: Var, labels: Arc<Vec<f64>>, mask: Arc<Vec<bool>>) -> Var {
        let pv = &self.nodes[p.0].value;
        assert_eq!(pv.cols(), 1, "bce expects a probability column");
        assert_eq!(pv.rows(), labels.len());
        assert_eq!(pv.rows(), mask.len());
        let n = mask.iter().filter(|&&m| m).count();
        assert!(n > 0, "bce needs at least one valid row");
        let mut total = 0.0;
        for r in 0..pv.rows() {
            if mask[r] {
                let p = clamp_prob(pv.get(r, 0));
                let y = labels[r];
                total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        self.push(Tensor::scalar(total / n as f64), Op::BceMasked { p: p.0, labels, mask })
    }

    /// Generalized IoU of a predicted `(start, end)` row against a fixed
    /// ground-truth interval, with piecewise-exact derivatives.
    pub fn giou_span(&mut self, pred: Var, gt: (f64, f64)) -> Var {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.shape(), (1, 2), "giou_span expects a 1x2 (start, end) row");
        let value = crate::span::giou_raw(pv.get(0, 0), pv.get(0, 1), gt.0, gt.1);
        self.push(Tensor::scalar(value), Op::GiouSpan { pred: pred.0, gt })
    }

    /// Run reverse-mode accumulation from the given seed gradients.
    /// Returns per-node gradients indexed like the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, seed) in seeds {
            assert_eq!(self.nodes[var.0].value.shape(), seed.shape(), "seed shape mismatch");
            match &mut grads[var.0] {
                Some(g) => g.add_assign(seed),
                slot => *slot = Some(seed.clone()),
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Convenience: backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, out: Var) -> Gradients {
        assert_eq!(self.nodes[out.0].value.shape(), (1, 1), "backward_scalar needs a scalar output");
        self.backward(&[(out, Tensor::scalar(1.0))])
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], parent: usize, delta: Tensor| {
            match &mut grads[parent] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g.matmul_transpose(bv));
                add_to(grads, *b, av.transpose_matmul(g));
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.scale(-1.0));
            }
            Op::MulElem(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g.mul_elem(bv));
                add_to(grads, *b, g.mul_elem(av));
            }
            Op::Scale(a, c) => add_to(grads, *a, g.scale(*c)),
            Op::AddRowBroadcast(a, bias) => {
                add_to(grads, *a, g.clone());
                let mut db = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                add_to(grads, *bias, db);
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                let mut dx = g.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(av.data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                add_to(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[idx].value;
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(yv.data()) {
                    *d *= y * (1.0 - y);
                }
                add_to(grads, *a, dx);
            }
            Op::Transpose(a) => add_to(grads, *a, g.transpose()),
            Op::MaskedSoftmaxRows(a, mask) => {
                let yv = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let mut dot = 0.0;
                    for c in 0..g.cols() {
                        if mask[c] {
                            dot += g.get(r, c) * yv.get(r, c);
                        }
                    }
                    for c in 0..g.cols() {
                        if mask[c] {
                            dx.set(r, c, yv.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                add_to(grads, *a, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let d = xv.cols() as f64;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let mut dgamma = Tensor::zeros(1, xv.cols());
                let mut dbeta = Tensor::zeros(1, xv.cols());
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (mean, inv_std) = row_moments(row, *eps);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..xv.cols() {
                        let xhat = (row[c] - mean) * inv_std;
                        let go = g.get(r, c);
                        dgamma.data_mut()[c] += go * xhat;
                        dbeta.data_mut()[c] += go;
                        let dxhat = go * gv.data()[c];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    for c in 0..xv.cols() {
                        let xhat = (row[c] - mean) * inv_std;
                        let dxhat = g.get(r, c) * gv.data()[c];
                        dx.set(r, c, inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gamma, dgamma);
                add_to(grads, *beta, dbeta);
            }
            Op::ConcatRows(a, b) => {
                let a_rows = self.nodes[*a].value.rows();
                let cols = g.cols();
                let da = Tensor::from_vec(a_rows, cols, g.data()[..a_rows * cols].to_vec());
                let b_rows = g.rows() - a_rows;
                let db = Tensor::from_vec(b_rows, cols, g.data()[a_rows * cols..].to_vec());
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::ConcatCols(a, b) => {
                let a_cols = self.nodes[*a].value.cols();
                let mut da = Tensor::zeros(g.rows(), a_cols);
                let mut db = Tensor::zeros(g.rows(), g.cols() - a_cols);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..a_cols]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[a_cols..]);
                }
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::SliceRows { x, start } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                add_to(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                add_to(grads, *x, dx);
            }
            Op::MaskedMeanRows(a, mask) => {
                let av = &self.nodes[*a].value;
                let n = mask.iter().filter(|&&m| m).count() as f64;
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = v / n;
                        }
                    }
                }
                add_to(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let av = &self.nodes[*a].value;
                add_to(grads, *a, Tensor::filled(av.rows(), av.cols(), g.item()));
            }
            Op::L2NormalizeRows { x, eps } => {
                let xv = &self.nodes[*x].value;
                let yv = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let norm = row_norm(xv.row(r)).max(*eps);
                    let clamped = row_norm(xv.row(r)) <= *eps;
                    let mut dot = 0.0;
                    for c in 0..xv.cols() {
                        dot += g.get(r, c) * yv.get(r, c);
                    }
                    for c in 0..xv.cols() {
                        let v = if clamped {
                            // Below the clamp the map is x / eps: plain scaling.
                            g.get(r, c) / norm
                        } else {
                            (g.get(r, c) - yv.get(r, c) * dot) / norm
                        };
                        dx.set(r, c, v);
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let yv = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for c in 0..g.cols() {
                        dx.set(r, c, g.get(r, c) - yv.get(r, c).exp() * gsum);
                    }
                }
                add_to(grads, *a, dx);
            }
            Op::NllRows(a, ids) => {
                let av = &self.nodes[*a].value;
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                for (r, &id) in ids.iter().enumerate() {
                    dx.set(r, id, -g.get(r, 0));
                }
                add_to(grads, *a, dx);
            }
            Op::MaskedLogSumExpRows(a, masks) => {
                let av = &self.nodes[*a].value;
                let yv = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                for (r, mask) in masks.iter().enumerate() {
                    let lse = yv.get(r, 0);
                    for (c, &m) in mask.iter().enumerate() {
                        if m {
                            dx.set(r, c, g.get(r, 0) * (av.get(r, c) - lse).exp());
                        }
                    }
                }
                add_to(grads, *a, dx);
            }
            Op::Abs(a) => {
                let av = &self.nodes[*a].value;
                let mut dx = g.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(av.data()) {
                    *d *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                add_to(grads, *a, dx);
            }
            Op::BceMasked { p, labels, mask } => {
                let pv = &self.nodes[*p].value;
                let n = mask.iter().filter(|&&m| m).count() as f64;
                let gs = g.item();
                let mut dx = Tensor::zeros(pv.rows(), 1);
                for r in 0..pv.rows() {
                    if mask[r] {
                        let raw = pv.get(r, 0);
                        let pc = clamp_prob(raw);
                        // Zero slope outside the clamp window.
                        if raw > 1e-7 && raw < 1.0 - 1e-7 {
                            dx.set(r, 0, gs * (pc - labels[r]) / (pc * (1.0 - pc)) / n);
                        }
                    }
                }
                add_to(grads, *p, dx);
            }
            Op::GiouSpan { pred, gt } => {
                let pv = &self.nodes[*pred].value;
                let (ds, de) = giou_span_partials(pv.get(0, 0), pv.get(0, 1), gt.0, gt.1);
                let gs = g.item();
                add_to(grads, *pred, Tensor::from_vec(1, 2, vec![gs * ds, gs * de]));
            }
        }
    }
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seeded outputs with respect to `var`; zero tensor if
    /// the node was never reached.
    pub fn get(&self, tape: &Tape, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(var);
                Tensor::zeros(v.rows(), v.cols())
            }
        }
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7)
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

/// Piecewise partial derivatives of 1-D generalized IoU with respect to the
/// predicted start and end.
fn giou_span_partials(sp: f64, ep: f64, sg: f64, eg: f64) -> (f64, f64) {
    let inter = (ep.min(eg) - sp.max(sg)).max(0.0);
    let union = (ep - sp) + (eg - sg) - inter;
    let enclosing = ep.max(eg) - sp.min(sg);
    if enclosing <= 0.0 || union <= 0.0 {
        return (0.0, 0.0);
    }
    // d inter / d (sp, ep)
    let di_dsp = if inter > 0.0 && sp > sg { -1.0 } else { 0.0 };
    let di_dep = if inter > 0.0 && ep < eg { 1.0 } else { 0.0 };
    // d union / d (sp, ep)
    let du_dsp = -1.0 - di_dsp;
    let du_dep = 1.0 - di_dep;
    // d enclosing / d (sp, ep)
    let dc_dsp = if sp < sg { -1.0 } else { 0.0 };
    let dc_dep = if ep > eg { 1.0 } else { 0.0 };
    // giou = inter/union - 1 + union/enclosing
    let d_iou_dsp = (di_dsp * union - inter * du_dsp) / (union * union);
    let d_iou_dep = (di_dep * union - inter * du_dep) / (union * union);
    let d_pen_dsp = (du_dsp * enclosing - union * dc_dsp) / (enclosing * enclosing);
    let d_pen_dep = (du_dep * enclosing - union * dc_dep) / (enclosing * enclosing);
    (d_iou_dsp + d_pen_dsp, d_iou_dep + d_pen_dep)
}

/// Finite-difference utilities used by the verification suite and `selftest`.
pub mod gradcheck {
    use super::*;

    /// Compare analytic gradients against central finite differences for a
    /// scalar-valued graph builder. Returns the worst relative error across
    /// all checked elements.
    ///
    /// `build` receives a fresh tape plus leaf vars for `inputs`, in order,
    /// and must return the scalar output var.
    pub fn max_relative_error(
        inputs: &[Tensor],
        step: f64,
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    ) -> f64 {
        let eval = |tensors: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).item()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward_scalar(out);

        let mut worst: f64 = 0.0;
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(&tape, vars[i]);
            for e in 0..input.len() {
                let orig = work[i].data()[e];
                work[i].data_mut()[e] = orig + step;
                let up = eval(&work);
                work[i].data_mut()[e] = orig - step;
                let down = eval(&work);
                work[i].data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic.data()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::max_relative_error;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_chain_gradcheck() {
        let mut r = rng(1);
        let inputs = vec![Tensor::xavier(3, 4, &mut r), Tensor::xavier(4, 2, &mut r)];
        let err = max_relative_error(&inputs, 1e-5, &|t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.sigmoid(m);
            t.sum_all(s)
        });
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn masked_softmax_gradcheck_and_zeroing() {
        let mut r = rng(2);
        let inputs = vec![Tensor::xavier(3, 5, &mut r)];
        let mask = Arc::new(vec![true, false, true, true, false]);
        let m2 = mask.clone();
        let err = max_relative_error(&inputs, 1e-5, &|t, v| {
            let sm = t.masked_softmax_rows(v[0], m2.clone());
            let sq = t.mul_elem(sm, sm);
            t.sum_all(sq)
        });
        assert!(err < 1e-7, "relative error {err}");

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::xavier(2, 5, &mut r));
        let y = tape.masked_softmax_rows(x, mask);
        let yv = tape.value(y);
        for r in 0..2 {
            assert_eq!(yv.get(r, 1), 0.0);
            assert_eq!(yv.get(r, 4), 0.0);
            let sum: f64 = yv.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_valid_column_softmax_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(2, 3, vec![5.0, -2.0, 0.3, -9.0, 4.0, 2.2]));
        let y = tape.masked_softmax_rows(x, Arc::new(vec![false, true, false]));
        let yv = tape.value(y);
        assert_eq!(yv.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn equal_logits_split_evenly() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 2, vec![0.7, 0.7]));
        let y = tape.masked_softmax_rows(x, Arc::new(vec![true, true]));
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut r = rng(3);
        let inputs = vec![
            Tensor::xavier(4, 6, &mut r),
            Tensor::xavier(1, 6, &mut r),
            Tensor::xavier(1, 6, &mut r),
        ];
        let err = max_relative_error(&inputs, 1e-5, &|t, v| {
            let ln = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let s = t.sigmoid(ln);
            t.sum_all(s)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut r = rng(4);
        let inputs = vec![Tensor::xavier(3, 4, &mut r), Tensor::xavier(2, 4, &mut r)];
        let err = max_relative_error(&inputs, 1e-5, &|t, v| {
            let cat = t.concat_rows(v[0], v[1]);
            let sliced = t.slice_rows(cat, 1, 3);
            let cols = t.slice_cols(sliced, 1, 2);
            let tr = t.transpose(cols);
            let sq = t.mul_elem(tr, tr);
            t.sum_all(sq)
        });
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn pooling_and_normalize_gradcheck() {
        let mut r = rng(5);
        let inputs = vec![Tensor::xavier(4, 3, &mut r)];
        let mask = Arc::new(vec![true, true, false, true]);
        let err = max_relative_error(&inputs, 1e-5, &|t, v| {
            let mean = t.masked_mean_rows(v[0], mask.clone());
            let norm = t.l2_normalize_rows(mean, 1e-12);
            let sq = t.mul_elem(norm, norm);
            let s = t.sum_all(sq);
            // sum of squares of a normalized row is constantly 1; mix in a
            // non-trivial path so the check is not vacuous
            let raw = t.sum_all(norm);
            t.add(s, raw)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn log_softmax_nll_gradcheck() {
        let mut r = rng(6);
        let inputs = vec![Tensor::xavier(3, 7, &mut r)];
        let ids = Arc::new(vec![2usize, 0, 6]);
        let err = max_relative_error(&inputs, 1e-5, &|t, v| {
            let lp = t.log_softmax_rows(v[0]);
            let nll = t.nll_rows(lp, ids.clone());
            t.sum_all(nll)
        });
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn masked_logsumexp_gradcheck() {
        let mut r = rng(7);
        let inputs = vec![Tensor::xavier(2, 4, &mut r)];
        let masks = Arc::new(vec![vec![true, true, false, true], vec![false, true, true, true]]);
        let err = max_relative_error(&inputs, 1e-5, &|t, v| {
            let lse = t.masked_logsumexp_rows(v[0], masks.clone());
            t.sum_all(lse)
        });
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn logsumexp_shift_invariance() {
        let base = Tensor::from_vec(1, 3, vec![1.0, 2.0, 0.5]);
        let masks = Arc::new(vec![vec![true, true, true]]);
        let mut t1 = Tape::new();
        let a = t1.leaf(base.clone());
        let full = t1.masked_logsumexp_rows(a, masks.clone());
        let pos = t1.masked_logsumexp_rows(a, Arc::new(vec![vec![true, false, true]]));
        let base_ratio = t1.value(full).item() - t1.value(pos).item();
        for offset in [10.0, 1e3, 1e4] {
            let mut t2 = Tape::new();
            let shifted = t2.leaf(base.map(|x| x + offset));
            let full = t2.masked_logsumexp_rows(shifted, masks.clone());
            let pos = t2.masked_logsumexp_rows(shifted, Arc::new(vec![vec![true, false, true]]));
            let ratio = t2.value(full).item() - t2.value(pos).item();
            assert!((ratio - base_ratio).abs() < 1e-9, "offset {offset}");
        }
    }

    #[test]
    fn bce_gradcheck() {
        let inputs = vec![Tensor::from_vec(3, 1, vec![0.3, 0.8, 0.55])];
        let labels = Arc::new(vec![1.0, 0.0, 1.0]);
        let mask = Arc::new(vec![true, true, false]);
        let err = max_relative_error(&inputs, 1e-6, &|t, v| {
            t.bce_masked(v[0], labels.clone(), mask.clone())
        });
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn giou_span_gradcheck() {
        for (pred, gt) in [
            (vec![0.2, 0.6], (0.3, 0.8)),   // overlap
            (vec![0.1, 0.2], (0.5, 0.9)),   // disjoint
            (vec![0.25, 0.95], (0.3, 0.6)), // containment
        ] {
            let inputs = vec![Tensor::from_vec(1, 2, pred)];
            let err = max_relative_error(&inputs, 1e-6, &|t, v| t.giou_span(v[0], gt));
            assert!(err < 1e-6, "relative error {err} for gt {gt:?}");
        }
    }

    #[test]
    fn abs_and_bias_gradcheck() {
        let mut r = rng(8);
        let inputs = vec![Tensor::xavier(3, 4, &mut r), Tensor::xavier(1, 4, &mut r)];
        let err = max_relative_error(&inputs, 1e-5, &|t, v| {
            let b = t.add_row_broadcast(v[0], v[1]);
            let a = t.abs(b);
            t.sum_all(a)
        });
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn relu_gradcheck_away_from_kink() {
        let inputs = vec![Tensor::from_vec(2, 2, vec![0.5, -0.7, 1.2, -0.1])];
        let err = max_relative_error(&inputs, 1e-6, &|t, v| {
            let r = t.relu(v[0]);
            let s = t.mul_elem(r, r);
            t.sum_all(s)
        });
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let d = tape.detach(x);
        let y = tape.mul_elem(d, d);
        let grads = tape.backward_scalar(y);
        assert!(grads.get_ref(x).is_none());
        assert_eq!(grads.get(&tape, x).item(), 0.0);
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.add(x, x);
        let grads = tape.backward_scalar(y);
        assert_eq!(grads.get(&tape, x).item(), 2.0);
    }

    #[test]
    fn multi_seed_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let grads = tape.backward(&[(a, Tensor::scalar(1.0)), (b, Tensor::scalar(1.0))]);
        assert_eq!(grads.get(&tape, x).item(), 5.0);
    }
}
