//! Reverse-mode differentiation over a tape of tensor primitives.
//!
//! A forward pass records each primitive on a [`Tape`] together with the
//! values the backward pass needs. Calling [`Tape::backward`] on a scalar
//! root walks the records in reverse, producing exact analytic gradients;
//! values that never reach the root simply keep no gradient. Each tape is
//! confined to one training step on one thread; primitive internals may
//! parallelize over rows but stay bitwise deterministic.

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use std::sync::Arc;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Matmul(ValueId, ValueId),
    Spmm(Arc<CsrMatrix>, ValueId),
    Add(ValueId, ValueId),
    AddBias(ValueId, ValueId),
    Relu(ValueId),
    Scale(ValueId, f64),
    MulElem(ValueId, Arc<Vec<f64>>),
    RowGather(ValueId, Arc<Vec<usize>>),
    SegmentSum(ValueId, Arc<Vec<usize>>),
    SegmentMean(ValueId, Arc<Vec<usize>>, Vec<usize>),
    AppendRows(ValueId, ValueId),
    ConcatCols(ValueId, ValueId),
    Mse(ValueId, Arc<Tensor>),
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Arc<Vec<usize>>,
        mask: Arc<Vec<usize>>,
        probs: Tensor,
    },
    SigmoidBce(ValueId, Arc<Vec<f64>>),
    PairwiseDot(ValueId, ValueId),
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
}

/// Gradients produced by one backward pass, indexed by [`ValueId`].
/// Values the loss never touched have no entry; their gradient is zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

/// Operation tape: forward values plus what backward needs, in order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.push_arc(op, Arc::new(value))
    }

    fn push_arc(&mut self, op: Op, value: Arc<Tensor>) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value)
    }

    /// Record a shared input without copying it.
    pub fn leaf_arc(&mut self, value: Arc<Tensor>) -> ValueId {
        self.push_arc(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::shape(format!(
                "matmul: {}x{} @ {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let out = matmul(ta, tb);
        Ok(self.push(Op::Matmul(a, b), out))
    }

    pub fn spmm(&mut self, m: &Arc<CsrMatrix>, b: ValueId) -> Result<ValueId> {
        let out = m.matmul_dense(self.value(b))?;
        Ok(self.push(Op::Spmm(Arc::clone(m), b), out))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Broadcast-add a `[1, d]` row vector to every row of a matrix.
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape(format!(
                "add_bias: matrix {:?} with bias {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(Op::AddBias(a, bias), out))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::from_vec(ta.shape(), data).expect("same shape");
        self.push(Op::Relu(a), out)
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| c * x).collect();
        let out = Tensor::from_vec(ta.shape(), data).expect("same shape");
        self.push(Op::Scale(a, c), out)
    }

    /// Elementwise product with a constant mask (dropout and friends).
    pub fn mul_elem(&mut self, a: ValueId, mask: &Arc<Vec<f64>>) -> Result<ValueId> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(Error::shape(format!(
                "mul_elem: mask of {} for {} elements",
                mask.len(),
                ta.len()
            )));
        }
        let data = ta.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(Op::MulElem(a, Arc::clone(mask)), out))
    }

    /// Select rows by index; duplicate indices are allowed.
    pub fn row_gather(&mut self, a: ValueId, rows: &Arc<Vec<usize>>) -> Result<ValueId> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            if r >= ta.rows() {
                return Err(Error::shape(format!(
                    "row_gather: index {r} out of range for {} rows",
                    ta.rows()
                )));
            }
            data.extend_from_slice(ta.row(r));
        }
        let out = Tensor::from_vec(&[rows.len(), c], data)?;
        Ok(self.push(Op::RowGather(a, Arc::clone(rows)), out))
    }

    /// Sum rows into `num_segments` groups given per-row segment ids.
    /// Contributions accumulate in value-sorted order (see `CsrMatrix`).
    pub fn segment_sum(
        &mut self,
        a: ValueId,
        segments: &Arc<Vec<usize>>,
        num_segments: usize,
    ) -> Result<ValueId> {
        let out = self.segment_reduce(a, segments, num_segments, None)?;
        Ok(self.push(Op::SegmentSum(a, Arc::clone(segments)), out))
    }

    /// Mean of rows per segment; errors on empty segments.
    pub fn segment_mean(
        &mut self,
        a: ValueId,
        segments: &Arc<Vec<usize>>,
        num_segments: usize,
    ) -> Result<ValueId> {
        let counts = segment_counts(segments, num_segments, self.value(a).rows())?;
        if let Some(s) = counts.iter().position(|&c| c == 0) {
            return Err(Error::shape(format!("segment_mean: segment {s} is empty")));
        }
        let out = self.segment_reduce(a, segments, num_segments, Some(&counts))?;
        Ok(self.push(Op::SegmentMean(a, Arc::clone(segments), counts), out))
    }

    fn segment_reduce(
        &self,
        a: ValueId,
        segments: &Arc<Vec<usize>>,
        num_segments: usize,
        mean_counts: Option<&[usize]>,
    ) -> Result<Tensor> {
        let ta = self.value(a);
        let c = ta.cols();
        if segments.len() != ta.rows() {
            return Err(Error::shape(format!(
                "segment ids: {} for {} rows",
                segments.len(),
                ta.rows()
            )));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_segments];
        for (i, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::shape(format!(
                    "segment id {s} out of range for {num_segments} segments"
                )));
            }
            members[s].push(i);
        }
        let mut out = Tensor::zeros(&[num_segments, c]);
        let mut scratch = Vec::new();
        for (s, rows) in members.iter().enumerate() {
            let orow = &mut out.data_mut()[s * c..(s + 1) * c];
            for j in 0..c {
                scratch.clear();
                scratch.extend(rows.iter().map(|&i| ta.data()[i * c + j]));
                scratch.sort_unstable_by(|x, y| x.total_cmp(y));
                let mut acc: f64 = scratch.iter().sum();
                if let Some(counts) = mean_counts {
                    acc /= counts[s] as f64;
                }
                orow[j] = acc;
            }
        }
        Ok(out)
    }

    /// Row-wise concatenation: stack `b` under `a` (equal column counts).
    pub fn append_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape(format!(
                "append_rows: {} vs {} columns",
                ta.cols(),
                tb.cols()
            )));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::from_vec(&[ta.rows() + tb.rows(), ta.cols()], data)?;
        Ok(self.push(Op::AppendRows(a, b), out))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::shape(format!(
                "concat_cols: {} vs {} rows",
                ta.rows(),
                tb.rows()
            )));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.rows() * (ca + cb));
        for i in 0..ta.rows() {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor::from_vec(&[ta.rows(), ca + cb], data)?;
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    /// Mean squared error against a constant target, over all entries.
    pub fn mse(&mut self, pred: ValueId, target: &Tensor) -> Result<ValueId> {
        let tp = self.value(pred);
        if !tp.same_shape(target) {
            return Err(Error::shape(format!(
                "mse: prediction {:?} vs target {:?}",
                tp.shape(),
                target.shape()
            )));
        }
        if tp.is_empty() {
            return Err(Error::shape("mse over zero entries"));
        }
        let n = tp.len() as f64;
        let loss: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Op::Mse(pred, Arc::new(target.clone())),
            Tensor::scalar(loss),
        ))
    }

    /// Mean softmax cross-entropy over the masked rows of a logit matrix.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &Arc<Vec<usize>>,
        mask: &Arc<Vec<usize>>,
    ) -> Result<ValueId> {
        let tl = self.value(logits);
        let (n, c) = (tl.rows(), tl.cols());
        if labels.len() != n {
            return Err(Error::shape(format!("labels: {} for {} rows", labels.len(), n)));
        }
        if mask.is_empty() {
            return Err(Error::shape("cross-entropy over an empty mask"));
        }
        let mut probs = Tensor::zeros(&[mask.len(), c]);
        let mut total = 0.0;
        for (k, &r) in mask.iter().enumerate() {
            if r >= n {
                return Err(Error::shape(format!("mask row {r} out of range")));
            }
            let y = labels[r];
            if y >= c {
                return Err(Error::shape(format!("label {y} out of range for {c} classes")));
            }
            let row = tl.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += (x - m).exp();
            }
            let lse = m + z.ln();
            total += lse - row[y];
            let prow = &mut probs.data_mut()[k * c..(k + 1) * c];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / mask.len() as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: Arc::clone(labels),
                mask: Arc::clone(mask),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean sigmoid binary cross-entropy of logits against 0/1 targets.
    pub fn sigmoid_bce(&mut self, logits: ValueId, targets: &Arc<Vec<f64>>) -> Result<ValueId> {
        let tl = self.value(logits);
        if targets.len() != tl.len() {
            return Err(Error::shape(format!(
                "bce: {} targets for {} logits",
                targets.len(),
                tl.len()
            )));
        }
        if tl.is_empty() {
            return Err(Error::shape("bce over zero entries"));
        }
        // stable form: max(x,0) - x*t + ln(1 + exp(-|x|))
        let loss: f64 = tl
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&x, &t)| x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln())
            .sum::<f64>()
            / tl.len() as f64;
        Ok(self.push(Op::SigmoidBce(logits, Arc::clone(targets)), Tensor::scalar(loss)))
    }

    /// Row-wise dot product of two equally shaped matrices, `[n, 1]` output.
    pub fn pairwise_dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(format!(
                "pairwise_dot: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = (0..ta.rows())
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::from_vec(&[ta.rows(), 1], data)?;
        Ok(self.push(Op::PairwiseDot(a, b), out))
    }

    /// Reverse pass from a scalar root. Visits each node once, newest first.
    pub fn backward(&mut self, root: ValueId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must be scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(grad); // keep for the caller
                    continue;
                }
                Op::Matmul(a, b) => {
                    let ga = matmul_nt(&grad, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &grad);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Spmm(m, b) => {
                    let gb = m.transpose_matmul_dense(&grad)?;
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], grad.clone());
                    accumulate(&mut grads[b.0], grad);
                }
                Op::AddBias(a, bias) => {
                    let c = grad.cols();
                    let mut gb = Tensor::zeros(&[1, c]);
                    for row in grad.data().chunks(c) {
                        for (o, &g) in gb.data_mut().iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads[a.0], grad);
                    accumulate(&mut grads[bias.0], gb);
                }
                Op::Relu(a) => {
                    let input = self.value(*a);
                    let data = input
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(input.shape(), data)?);
                }
                Op::Scale(a, c) => {
                    let data = grad.data().iter().map(|&g| c * g).collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(grad.shape(), data)?);
                }
                Op::MulElem(a, mask) => {
                    let data = grad.data().iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(grad.shape(), data)?);
                }
                Op::RowGather(a, rows) => {
                    let input_shape = self.value(*a).shape().to_vec();
                    let c = grad.cols();
                    let mut ga = Tensor::zeros(&input_shape);
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut ga.data_mut()[r * c..(r + 1) * c];
                        for (o, &g) in dst.iter_mut().zip(grad.row(k)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SegmentSum(a, segments) => {
                    let shape = self.value(*a).shape().to_vec();
                    let c = grad.cols();
                    let mut ga = Tensor::zeros(&shape);
                    for (i, &s) in segments.iter().enumerate() {
                        let dst = &mut ga.data_mut()[i * c..(i + 1) * c];
                        dst.copy_from_slice(grad.row(s));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SegmentMean(a, segments, counts) => {
                    let shape = self.value(*a).shape().to_vec();
                    let c = grad.cols();
                    let mut ga = Tensor::zeros(&shape);
                    for (i, &s) in segments.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        let dst = &mut ga.data_mut()[i * c..(i + 1) * c];
                        for (o, &g) in dst.iter_mut().zip(grad.row(s)) {
                            *o = g * inv;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::AppendRows(a, b) => {
                    let (ra, c) = (self.value(*a).rows(), self.value(*a).cols());
                    let rb = self.value(*b).rows();
                    let ga = Tensor::from_vec(&[ra, c], grad.data()[..ra * c].to_vec())?;
                    let gb = Tensor::from_vec(&[rb, c], grad.data()[ra * c..].to_vec())?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::ConcatCols(a, b) => {
                    let (ra, ca) = (self.value(*a).rows(), self.value(*a).cols());
                    let cb = self.value(*b).cols();
                    let mut ga = Tensor::zeros(&[ra, ca]);
                    let mut gb = Tensor::zeros(&[ra, cb]);
                    for i in 0..ra {
                        let grow = grad.row(i);
                        ga.data_mut()[i * ca..(i + 1) * ca].copy_from_slice(&grow[..ca]);
                        gb.data_mut()[i * cb..(i + 1) * cb].copy_from_slice(&grow[ca..]);
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Mse(pred, target) => {
                    let g = grad.item();
                    let tp = self.value(*pred);
                    let scale = 2.0 * g / tp.len() as f64;
                    let data = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| scale * (p - t))
                        .collect();
                    accumulate(&mut grads[pred.0], Tensor::from_vec(tp.shape(), data)?);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    mask,
                    probs,
                } => {
                    let g = grad.item() / mask.len() as f64;
                    let tl = self.value(*logits);
                    let c = tl.cols();
                    let mut gl = Tensor::zeros(tl.shape());
                    for (k, &r) in mask.iter().enumerate() {
                        let dst = &mut gl.data_mut()[r * c..(r + 1) * c];
                        for (o, &p) in dst.iter_mut().zip(probs.row(k)) {
                            *o += g * p;
                        }
                        dst[labels[r]] -= g;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::SigmoidBce(logits, targets) => {
                    let tl = self.value(*logits);
                    let g = grad.item() / tl.len() as f64;
                    let data = tl
                        .data()
                        .iter()
                        .zip(targets.iter())
                        .map(|(&x, &t)| g * (sigmoid(x) - t))
                        .collect();
                    accumulate(&mut grads[logits.0], Tensor::from_vec(tl.shape(), data)?);
                }
                Op::PairwiseDot(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let c = ta.cols();
                    let mut ga = Tensor::zeros(ta.shape());
                    let mut gb = Tensor::zeros(tb.shape());
                    for i in 0..ta.rows() {
                        let g = grad.data()[i];
                        let (arow, brow) = (ta.row(i), tb.row(i));
                        for j in 0..c {
                            ga.data_mut()[i * c + j] = g * brow[j];
                            gb.data_mut()[i * c + j] = g * arow[j];
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            for (o, &d) in t.data_mut().iter_mut().zip(delta.data()) {
                *o += d;
            }
        }
    }
}

fn segment_counts(segments: &[usize], num_segments: usize, rows: usize) -> Result<Vec<usize>> {
    if segments.len() != rows {
        return Err(Error::shape(format!(
            "segment ids: {} for {rows} rows",
            segments.len()
        )));
    }
    let mut counts = vec![0usize; num_segments];
    for &s in segments {
        if s >= num_segments {
            return Err(Error::shape(format!(
                "segment id {s} out of range for {num_segments} segments"
            )));
        }
        counts[s] += 1;
    }
    Ok(counts)
}
