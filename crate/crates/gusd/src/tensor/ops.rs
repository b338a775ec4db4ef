//! Forward and backward rules for every tape operation.
//!
//! The op set is exactly what the model needs: elementwise math, matmul,
//! row/column plumbing, grouped self-attention kernels, sparse edge
//! attention kernels, segment reductions for genre pooling, and fused
//! numerically-stable losses. No general broadcasting: binary ops accept
//! identical shapes or a right operand whose shape is a suffix of the
//! left's (leading-batch broadcast, used for bias rows).

use std::rc::Rc;

use rayon::prelude::*;

use super::{Param, Tape, TapeInner, Tensor};
use crate::error::{GusdError, Result};

/// Sparse directed edge set grouped by destination. `srcs[offsets[i]..offsets[i+1]]`
/// are the in-neighbor sources of node `i`, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeIndex {
    pub n_nodes: usize,
    pub offsets: Vec<u32>,
    pub srcs: Vec<u32>,
}

impl EdgeIndex {
    /// Build from (src, dst) pairs; sorts by (dst, src) and deduplicates.
    pub fn from_pairs(n_nodes: usize, pairs: &[(u32, u32)]) -> Self {
        let mut sorted: Vec<(u32, u32)> = pairs.to_vec();
        sorted.sort_unstable_by_key(|&(s, d)| (d, s));
        sorted.dedup();
        let mut offsets = vec![0u32; n_nodes + 1];
        let mut srcs = Vec::with_capacity(sorted.len());
        for &(s, d) in &sorted {
            offsets[d as usize + 1] += 1;
            srcs.push(s);
        }
        for i in 0..n_nodes {
            offsets[i + 1] += offsets[i];
        }
        EdgeIndex {
            n_nodes,
            offsets,
            srcs,
        }
    }

    pub fn len(&self) -> usize {
        self.srcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.srcs.is_empty()
    }

    /// In-neighbor sources of `dst`.
    pub fn in_neighbors(&self, dst: usize) -> &[u32] {
        &self.srcs[self.offsets[dst] as usize..self.offsets[dst + 1] as usize]
    }

    pub fn contains(&self, src: u32, dst: u32) -> bool {
        self.in_neighbors(dst as usize).binary_search(&src).is_ok()
    }

    /// All (src, dst) pairs in (dst, src) order.
    pub fn pairs(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.len());
        for dst in 0..self.n_nodes {
            for &s in self.in_neighbors(dst) {
                out.push((s, dst as u32));
            }
        }
        out
    }
}

/// Ragged grouping of member rows into segments.
/// `members[offsets[s]..offsets[s+1]]` are the rows belonging to segment `s`.
#[derive(Debug, Clone)]
pub struct SegmentIndex {
    pub offsets: Vec<u32>,
    pub members: Vec<u32>,
}

impl SegmentIndex {
    /// Build from (segment, member) pairs; sorted by (segment, member).
    pub fn from_pairs(n_segments: usize, pairs: &[(u32, u32)]) -> Self {
        let mut sorted: Vec<(u32, u32)> = pairs.to_vec();
        sorted.sort_unstable();
        let mut offsets = vec![0u32; n_segments + 1];
        let mut members = Vec::with_capacity(sorted.len());
        for &(s, m) in &sorted {
            offsets[s as usize + 1] += 1;
            members.push(m);
        }
        for i in 0..n_segments {
            offsets[i + 1] += offsets[i];
        }
        SegmentIndex { offsets, members }
    }

    pub fn n_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn segment(&self, s: usize) -> &[u32] {
        &self.members[self.offsets[s] as usize..self.offsets[s + 1] as usize]
    }
}

/// Reduction kind for [`Tensor::segment_reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Sum,
    Mean,
    Max,
}

pub(crate) enum Op {
    Leaf,
    Param(Param),
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { a: usize, c: f64 },
    Neg { a: usize },
    Exp { a: usize },
    Relu { a: usize },
    LeakyRelu { a: usize, slope: f64 },
    Gelu { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Softmax { a: usize, cols: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, cols: usize, stats: Vec<f64> },
    MeanRows { a: usize, rows: usize, cols: usize },
    GroupedMeanRows { a: usize, t: usize, cols: usize },
    SumAll { a: usize },
    SumAxis1 { a: usize, rows: usize, cols: usize },
    SumSquares { a: usize },
    ConcatCols { inputs: Vec<usize>, rows: usize, widths: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize, cols: usize },
    GatherRows { a: usize, idx: Rc<Vec<u32>>, cols: usize },
    ScatterAddRows { srcs: Vec<usize>, idxs: Vec<Rc<Vec<u32>>>, coeffs: Vec<Option<Rc<Vec<f64>>>>, cols: usize },
    Reshape { a: usize },
    Dropout { a: usize, mask: Rc<Vec<f64>> },
    ScaleRows { a: usize, w: Rc<Vec<f64>>, cols: usize },
    EdgeLogits { s_src: usize, s_dst: usize, edges: Rc<EdgeIndex>, slope: f64, heads: usize },
    EdgeSoftmax { logits: usize, edges: Rc<EdgeIndex>, heads: usize },
    EdgeAttnApply { att: usize, wx: usize, edges: Rc<EdgeIndex>, heads: usize, cols: usize },
    GroupedScores { q: usize, k: usize, t: usize, dh: usize },
    GroupedApply { att: usize, v: usize, t: usize, dh: usize },
    SegmentReduce { a: usize, index: Rc<SegmentIndex>, kind: SegmentKind, cols: usize, argmax: Vec<u32> },
    WeightedCeLoss { logits: usize, labels: Rc<Vec<u8>>, weights: Rc<Vec<f64>>, classes: usize },
    BceWithLogitsMean { scores: usize, targets: Rc<Vec<f64>> },
}

fn finish(tape: &Tape, name: &'static str, mut data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Result<Tensor> {
    tape.with_inner(|inner| inner.precision.round_buf(&mut data));
    if !data.iter().all(|v| v.is_finite()) {
        return Err(GusdError::NonFinite { op: name, detail: None });
    }
    Ok(tape.push(data, shape, requires_grad, op))
}

/// How the right operand of a binary op lines up with the left.
enum Broadcast {
    Same,
    /// Right shape is a suffix of the left shape; right tiles `reps` times.
    Suffix { reps: usize, nb: usize },
}

fn broadcast_of(a: &Tensor, b: &Tensor, what: &str) -> Result<Broadcast> {
    if a.shape == b.shape {
        return Ok(Broadcast::Same);
    }
    let (ra, rb) = (a.shape.len(), b.shape.len());
    if rb < ra && a.shape[ra - rb..] == b.shape[..] {
        let nb = b.numel();
        return Ok(Broadcast::Suffix { reps: a.numel() / nb.max(1), nb });
    }
    Err(GusdError::Shape(format!(
        "{what}: shapes {:?} and {:?} are not exact-match or leading-batch compatible",
        a.shape, b.shape
    )))
}

fn binary_forward(a: &Tensor, b: &Tensor, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Vec<usize>)> {
    let bc = broadcast_of(a, b, name)?;
    let av = a.tape.with_inner(|i| i.nodes[a.id].data.clone());
    let out = a.tape.with_inner(|inner| {
        let bd = &inner.nodes[b.id].data;
        match bc {
            Broadcast::Same => av.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>(),
            Broadcast::Suffix { nb, .. } => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % nb]))
                .collect(),
        }
    });
    Ok((out, a.shape.clone()))
}

fn same_tape(a: &Tensor, b: &Tensor) -> Result<()> {
    if !Rc::ptr_eq(&a.tape.inner_rc(), &b.tape.inner_rc()) {
        return Err(GusdError::Contract("operands belong to different tapes".into()));
    }
    Ok(())
}

impl Tape {
    pub(crate) fn inner_rc(&self) -> Rc<std::cell::RefCell<TapeInner>> {
        self.inner_handle()
    }
}

impl Tensor {
    fn rg2(&self, other: &Tensor) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_tape(self, other)?;
        let (data, shape) = binary_forward(self, other, "add", |x, y| x + y)?;
        finish(&self.tape, "add", data, shape, self.rg2(other), Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_tape(self, other)?;
        let (data, shape) = binary_forward(self, other, "sub", |x, y| x - y)?;
        finish(&self.tape, "sub", data, shape, self.rg2(other), Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_tape(self, other)?;
        let (data, shape) = binary_forward(self, other, "mul", |x, y| x * y)?;
        finish(&self.tape, "mul", data, shape, self.rg2(other), Op::Mul { a: self.id, b: other.id })
    }

    pub fn scalar_mul(&self, c: f64) -> Result<Tensor> {
        let data = self.tape.with_inner(|i| i.nodes[self.id].data.iter().map(|&x| x * c).collect());
        finish(&self.tape, "scalar_mul", data, self.shape.clone(), self.requires_grad(), Op::ScalarMul { a: self.id, c })
    }

    pub fn neg(&self) -> Result<Tensor> {
        let data = self.tape.with_inner(|i| i.nodes[self.id].data.iter().map(|&x| -x).collect());
        finish(&self.tape, "neg", data, self.shape.clone(), self.requires_grad(), Op::Neg { a: self.id })
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.tape.with_inner(|i| i.nodes[self.id].data.iter().map(|&x| x.exp()).collect());
        finish(&self.tape, "exp", data, self.shape.clone(), self.requires_grad(), Op::Exp { a: self.id })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.tape.with_inner(|i| i.nodes[self.id].data.iter().map(|&x| x.max(0.0)).collect());
        finish(&self.tape, "relu", data, self.shape.clone(), self.requires_grad(), Op::Relu { a: self.id })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        let data = self.tape.with_inner(|i| {
            i.nodes[self.id].data.iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect()
        });
        finish(&self.tape, "leaky_relu", data, self.shape.clone(), self.requires_grad(), Op::LeakyRelu { a: self.id, slope })
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let data = self.tape.with_inner(|i| i.nodes[self.id].data.iter().map(|&x| gelu_fwd(x)).collect());
        finish(&self.tape, "gelu", data, self.shape.clone(), self.requires_grad(), Op::Gelu { a: self.id })
    }

    /// Standard 2-d matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        same_tape(self, other)?;
        let (m, k) = self.rows_cols()?;
        let (k2, n) = other.rows_cols()?;
        if k != k2 {
            return Err(GusdError::Shape(format!(
                "matmul: inner dimensions differ ({:?} x {:?})",
                self.shape, other.shape
            )));
        }
        let out = self.tape.with_inner(|inner| {
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[other.id].data;
            matmul_raw(a, b, m, k, n)
        });
        finish(
            &self.tape, "matmul", out, vec![m, n], self.rg2(other),
            Op::Matmul { a: self.id, b: other.id, m, k, n },
        )
    }

    /// Softmax along the last axis (the only axis this engine supports).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis + 1 != self.shape.len() {
            return Err(GusdError::Shape(format!(
                "softmax: axis {axis} is not the last axis of shape {:?}",
                self.shape
            )));
        }
        let cols = self.shape[axis];
        if cols == 0 {
            return Err(GusdError::Shape("softmax over an empty axis".into()));
        }
        let data = self.tape.with_inner(|inner| {
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
                softmax_row(row, orow);
            }
            out
        });
        finish(&self.tape, "softmax", data, self.shape.clone(), self.requires_grad(), Op::Softmax { a: self.id, cols })
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        same_tape(self, gamma)?;
        same_tape(self, beta)?;
        let cols = *self.shape.last().ok_or_else(|| GusdError::Shape("layer_norm on 0-d tensor".into()))?;
        if gamma.numel() != cols || beta.numel() != cols {
            return Err(GusdError::Shape(format!(
                "layer_norm: gamma/beta length must be {cols}, got {}/{}",
                gamma.numel(), beta.numel()
            )));
        }
        let rows = self.numel() / cols;
        let mut stats = Vec::with_capacity(rows * 2);
        let data = self.tape.with_inner(|inner| {
            let x = &inner.nodes[self.id].data;
            let g = &inner.nodes[gamma.id].data;
            let b = &inner.nodes[beta.id].data;
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
                let mu = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                stats.push(mu);
                stats.push(inv);
                for c in 0..cols {
                    orow[c] = (row[c] - mu) * inv * g[c] + b[c];
                }
            }
            out
        });
        finish(
            &self.tape, "layer_norm", data, self.shape.clone(),
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, cols, stats },
        )
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols()?;
        if rows == 0 {
            return Err(GusdError::Shape("mean_rows over zero rows".into()));
        }
        let data = self.tape.with_inner(|inner| {
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; cols];
            for row in x.chunks_exact(cols) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= rows as f64;
            }
            out
        });
        finish(&self.tape, "mean_rows", data, vec![1, cols], self.requires_grad(), Op::MeanRows { a: self.id, rows, cols })
    }

    /// Mean over fixed-size row groups: `[g*t, c] -> [g, c]`.
    pub fn grouped_mean_rows(&self, t: usize) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols()?;
        if t == 0 || rows % t != 0 {
            return Err(GusdError::Shape(format!("grouped_mean_rows: {rows} rows not divisible by group size {t}")));
        }
        let groups = rows / t;
        let data = self.tape.with_inner(|inner| {
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; groups * cols];
            for g in 0..groups {
                let orow = &mut out[g * cols..(g + 1) * cols];
                for i in 0..t {
                    let row = &x[(g * t + i) * cols..(g * t + i + 1) * cols];
                    for (o, &v) in orow.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                for o in orow.iter_mut() {
                    *o /= t as f64;
                }
            }
            out
        });
        finish(&self.tape, "grouped_mean_rows", data, vec![groups, cols], self.requires_grad(), Op::GroupedMeanRows { a: self.id, t, cols })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.tape.with_inner(|i| i.nodes[self.id].data.iter().sum::<f64>());
        finish(&self.tape, "sum_all", vec![s], vec![1], self.requires_grad(), Op::SumAll { a: self.id })
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_axis1(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols()?;
        let data = self.tape.with_inner(|inner| {
            inner.nodes[self.id].data.chunks_exact(cols).map(|r| r.iter().sum::<f64>()).collect::<Vec<_>>()
        });
        finish(&self.tape, "sum_axis1", data, vec![rows, 1], self.requires_grad(), Op::SumAxis1 { a: self.id, rows, cols })
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_squares(&self) -> Result<Tensor> {
        let s = self.tape.with_inner(|i| i.nodes[self.id].data.iter().map(|&x| x * x).sum::<f64>());
        finish(&self.tape, "sum_squares", vec![s], vec![1], self.requires_grad(), Op::SumSquares { a: self.id })
    }

    /// Column slice `[r, cols] -> [r, len]` starting at `start`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols()?;
        if start + len > cols {
            return Err(GusdError::Shape(format!(
                "slice_cols: range {start}..{} out of width {cols}", start + len
            )));
        }
        let data = self.tape.with_inner(|inner| {
            let x = &inner.nodes[self.id].data;
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
            }
            out
        });
        finish(&self.tape, "slice_cols", data, vec![rows, len], self.requires_grad(), Op::SliceCols { a: self.id, start, len, cols })
    }

    /// Row gather: `out[i] = x[idx[i]]`.
    pub fn gather_rows(&self, idx: &Rc<Vec<u32>>) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols()?;
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= rows) {
            return Err(GusdError::Integrity(format!("gather_rows: index {bad} out of range (rows = {rows})")));
        }
        let data = self.tape.with_inner(|inner| {
            let x = &inner.nodes[self.id].data;
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                out.extend_from_slice(&x[i as usize * cols..(i as usize + 1) * cols]);
            }
            out
        });
        finish(&self.tape, "gather_rows", data, vec![idx.len(), cols], self.requires_grad(), Op::GatherRows { a: self.id, idx: idx.clone(), cols })
    }

    /// Copy with a new shape of identical element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(GusdError::Shape(format!(
                "reshape: {:?} -> {:?} changes element count", self.shape, shape
            )));
        }
        let data = self.tape.with_inner(|i| i.nodes[self.id].data.clone());
        finish(&self.tape, "reshape", data, shape, self.requires_grad(), Op::Reshape { a: self.id })
    }

    /// Inverted dropout. Identity when the tape is not in train mode or `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut impl rand::Rng) -> Result<Tensor> {
        if !self.tape.train_mode() || p <= 0.0 {
            return Ok(self.clone());
        }
        if p >= 1.0 {
            return Err(GusdError::Config(format!("dropout rate {p} must be < 1")));
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Rc::new(mask);
        let data = self.tape.with_inner(|inner| {
            inner.nodes[self.id].data.iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect::<Vec<_>>()
        });
        finish(&self.tape, "dropout", data, self.shape.clone(), self.requires_grad(), Op::Dropout { a: self.id, mask })
    }

    /// Scale each row by a fixed (non-differentiable) weight.
    pub fn scale_rows(&self, w: &Rc<Vec<f64>>) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols()?;
        if w.len() != rows {
            return Err(GusdError::Shape(format!("scale_rows: {} weights for {rows} rows", w.len())));
        }
        let data = self.tape.with_inner(|inner| {
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let wr = w[r];
                for c in 0..cols {
                    out[r * cols + c] = x[r * cols + c] * wr;
                }
            }
            out
        });
        finish(&self.tape, "scale_rows", data, self.shape.clone(), self.requires_grad(), Op::ScaleRows { a: self.id, w: w.clone(), cols })
    }

    /// Segment reduction of rows grouped by `index`: `[n, c] -> [S, c]`.
    /// Empty segments produce zero rows.
    pub fn segment_reduce(&self, index: &Rc<SegmentIndex>, kind: SegmentKind) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols()?;
        if let Some(&bad) = index.members.iter().find(|&&m| m as usize >= rows) {
            return Err(GusdError::Integrity(format!("segment_reduce: member row {bad} out of range (rows = {rows})")));
        }
        let n_seg = index.n_segments();
        let mut argmax = Vec::new();
        let data = self.tape.with_inner(|inner| {
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; n_seg * cols];
            if kind == SegmentKind::Max {
                argmax = vec![u32::MAX; n_seg * cols];
            }
            for s in 0..n_seg {
                let members = index.segment(s);
                if members.is_empty() {
                    continue;
                }
                let orow = &mut out[s * cols..(s + 1) * cols];
                match kind {
                    SegmentKind::Sum | SegmentKind::Mean => {
                        for &m in members {
                            let row = &x[m as usize * cols..(m as usize + 1) * cols];
                            for (o, &v) in orow.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        if kind == SegmentKind::Mean {
                            for o in orow.iter_mut() {
                                *o /= members.len() as f64;
                            }
                        }
                    }
                    SegmentKind::Max => {
                        let arow = &mut argmax[s * cols..(s + 1) * cols];
                        for (j, &m) in members.iter().enumerate() {
                            let row = &x[m as usize * cols..(m as usize + 1) * cols];
                            for c in 0..cols {
                                if j == 0 || row[c] > orow[c] {
                                    orow[c] = row[c];
                                    arow[c] = m;
                                }
                            }
                        }
                    }
                }
            }
            out
        });
        finish(
            &self.tape, "segment_reduce", data, vec![n_seg, cols], self.requires_grad(),
            Op::SegmentReduce { a: self.id, index: index.clone(), kind, cols, argmax },
        )
    }
}

/// Concatenate along the feature (last) axis; all inputs share the row count.
pub fn concat_cols(inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(GusdError::Shape("concat_cols of zero tensors".into()));
    }
    let tape = inputs[0].tape.clone();
    let (rows, _) = inputs[0].rows_cols()?;
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        same_tape(inputs[0], t)?;
        let (r, c) = t.rows_cols()?;
        if r != rows {
            return Err(GusdError::Shape(format!("concat_cols: row counts differ ({rows} vs {r})")));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let data = tape.with_inner(|inner| {
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (t, &w) in inputs.iter().zip(&widths) {
                let x = &inner.nodes[t.id].data;
                out.extend_from_slice(&x[r * w..(r + 1) * w]);
            }
        }
        out
    });
    let rg = inputs.iter().any(|t| t.requires_grad());
    finish(
        &tape, "concat_cols", data, vec![rows, total], rg,
        Op::ConcatCols { inputs: inputs.iter().map(|t| t.id).collect(), rows, widths },
    )
}

/// Scatter-add several row blocks into a fresh `[n_rows, c]` output:
/// `out[idx_k[i]] += coeff_k[i] * src_k[i]` for every block `k` in order.
pub fn scatter_add_rows(
    n_rows: usize,
    blocks: &[(&Tensor, Rc<Vec<u32>>, Option<Rc<Vec<f64>>>)],
) -> Result<Tensor> {
    if blocks.is_empty() {
        return Err(GusdError::Shape("scatter_add_rows of zero blocks".into()));
    }
    let tape = blocks[0].0.tape.clone();
    let (_, cols) = blocks[0].0.rows_cols()?;
    for (src, idx, coeff) in blocks {
        same_tape(blocks[0].0, src)?;
        let (r, c) = src.rows_cols()?;
        if c != cols {
            return Err(GusdError::Shape(format!("scatter_add_rows: column widths differ ({cols} vs {c})")));
        }
        if idx.len() != r {
            return Err(GusdError::Shape(format!("scatter_add_rows: {} indices for {r} rows", idx.len())));
        }
        if let Some(w) = coeff {
            if w.len() != r {
                return Err(GusdError::Shape(format!("scatter_add_rows: {} coefficients for {r} rows", w.len())));
            }
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n_rows) {
            return Err(GusdError::Integrity(format!("scatter_add_rows: index {bad} out of range (rows = {n_rows})")));
        }
    }
    let data = tape.with_inner(|inner| {
        let mut out = vec![0.0; n_rows * cols];
        for (src, idx, coeff) in blocks {
            let x = &inner.nodes[src.id].data;
            for (i, &dst) in idx.iter().enumerate() {
                let w = coeff.as_ref().map_or(1.0, |c| c[i]);
                let orow = &mut out[dst as usize * cols..(dst as usize + 1) * cols];
                let row = &x[i * cols..(i + 1) * cols];
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        out
    });
    let rg = blocks.iter().any(|(t, _, _)| t.requires_grad());
    finish(
        &tape, "scatter_add_rows", data, vec![n_rows, cols], rg,
        Op::ScatterAddRows {
            srcs: blocks.iter().map(|(t, _, _)| t.id).collect(),
            idxs: blocks.iter().map(|(_, i, _)| i.clone()).collect(),
            coeffs: blocks.iter().map(|(_, _, c)| c.clone()).collect(),
            cols,
        },
    )
}

/// Per-edge attention logits: `leaky_relu(s_src[src] + s_dst[dst])` for every
/// edge, one column per head. Output shape `[E, heads]` in (dst, src) edge order.
pub fn edge_logits(s_src: &Tensor, s_dst: &Tensor, edges: &Rc<EdgeIndex>, slope: f64) -> Result<Tensor> {
    same_tape(s_src, s_dst)?;
    let (n1, heads) = s_src.rows_cols()?;
    let (n2, h2) = s_dst.rows_cols()?;
    if n1 != edges.n_nodes || n2 != edges.n_nodes || heads != h2 {
        return Err(GusdError::Shape(format!(
            "edge_logits: score shapes {:?}/{:?} incompatible with {} nodes",
            s_src.shape, s_dst.shape, edges.n_nodes
        )));
    }
    let e = edges.len();
    let data = s_src.tape.with_inner(|inner| {
        let a = &inner.nodes[s_src.id].data;
        let b = &inner.nodes[s_dst.id].data;
        let mut out = vec![0.0; e * heads];
        let mut eid = 0;
        for dst in 0..edges.n_nodes {
            for &src in edges.in_neighbors(dst) {
                for h in 0..heads {
                    let v = a[src as usize * heads + h] + b[dst * heads + h];
                    out[eid * heads + h] = if v >= 0.0 { v } else { slope * v };
                }
                eid += 1;
            }
        }
        out
    });
    finish(
        &s_src.tape, "edge_logits", data, vec![e, heads], s_src.rg2(s_dst),
        Op::EdgeLogits { s_src: s_src.id, s_dst: s_dst.id, edges: edges.clone(), slope, heads },
    )
}

/// Softmax over each destination's in-edge group, per head. `[E, heads] -> [E, heads]`.
pub fn edge_softmax(logits: &Tensor, edges: &Rc<EdgeIndex>) -> Result<Tensor> {
    let (e, heads) = logits.rows_cols()?;
    if e != edges.len() {
        return Err(GusdError::Shape(format!("edge_softmax: {e} logit rows for {} edges", edges.len())));
    }
    let data = logits.tape.with_inner(|inner| {
        let x = &inner.nodes[logits.id].data;
        let mut out = vec![0.0; x.len()];
        for dst in 0..edges.n_nodes {
            let (lo, hi) = (edges.offsets[dst] as usize, edges.offsets[dst + 1] as usize);
            if lo == hi {
                continue;
            }
            for h in 0..heads {
                let mut mx = f64::NEG_INFINITY;
                for eid in lo..hi {
                    mx = mx.max(x[eid * heads + h]);
                }
                let mut z = 0.0;
                for eid in lo..hi {
                    let v = (x[eid * heads + h] - mx).exp();
                    out[eid * heads + h] = v;
                    z += v;
                }
                for eid in lo..hi {
                    out[eid * heads + h] /= z;
                }
            }
        }
        out
    });
    finish(
        &logits.tape, "edge_softmax", data, vec![e, heads], logits.requires_grad(),
        Op::EdgeSoftmax { logits: logits.id, edges: edges.clone(), heads },
    )
}

/// Head-averaged attention aggregation: for each destination node,
/// `out[dst] = sum_e mean_h(att[e,h]) * wx[src_e]`. Nodes without in-edges
/// produce zero rows. `att: [E, heads]`, `wx: [N, c]`, output `[N, c]`.
pub fn edge_attn_apply(att: &Tensor, wx: &Tensor, edges: &Rc<EdgeIndex>) -> Result<Tensor> {
    same_tape(att, wx)?;
    let (e, heads) = att.rows_cols()?;
    let (n, cols) = wx.rows_cols()?;
    if e != edges.len() || n != edges.n_nodes {
        return Err(GusdError::Shape(format!(
            "edge_attn_apply: att {:?} / wx {:?} incompatible with edge index ({} edges, {} nodes)",
            att.shape, wx.shape, edges.len(), edges.n_nodes
        )));
    }
    let data = att.tape.with_inner(|inner| {
        let a = &inner.nodes[att.id].data;
        let x = &inner.nodes[wx.id].data;
        let mut out = vec![0.0; n * cols];
        let inv_h = 1.0 / heads as f64;
        out.par_chunks_mut(cols).enumerate().for_each(|(dst, orow)| {
            let (lo, hi) = (edges.offsets[dst] as usize, edges.offsets[dst + 1] as usize);
            for eid in lo..hi {
                let src = edges.srcs[eid] as usize;
                let w: f64 = a[eid * heads..(eid + 1) * heads].iter().sum::<f64>() * inv_h;
                let row = &x[src * cols..(src + 1) * cols];
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        });
        out
    });
    finish(
        &att.tape, "edge_attn_apply", data, vec![n, cols], att.rg2(wx),
        Op::EdgeAttnApply { att: att.id, wx: wx.id, edges: edges.clone(), heads, cols },
    )
}

/// Scaled dot-product scores within fixed-size token groups:
/// `q, k: [G*t, dh] -> [G*t, t]`, `scores[g,i,j] = <q_gi, k_gj> / sqrt(dh)`.
pub fn grouped_scores(q: &Tensor, k: &Tensor, t: usize) -> Result<Tensor> {
    same_tape(q, k)?;
    if q.shape != k.shape {
        return Err(GusdError::Shape(format!("grouped_scores: q {:?} != k {:?}", q.shape, k.shape)));
    }
    let (rows, dh) = q.rows_cols()?;
    if t == 0 || rows % t != 0 {
        return Err(GusdError::Shape(format!("grouped_scores: {rows} rows not divisible by group size {t}")));
    }
    let groups = rows / t;
    let scale = 1.0 / (dh as f64).sqrt();
    let data = q.tape.with_inner(|inner| {
        let qd = &inner.nodes[q.id].data;
        let kd = &inner.nodes[k.id].data;
        let mut out = vec![0.0; rows * t];
        out.par_chunks_mut(t * t).enumerate().for_each(|(g, block)| {
            for i in 0..t {
                let qi = &qd[(g * t + i) * dh..(g * t + i + 1) * dh];
                for j in 0..t {
                    let kj = &kd[(g * t + j) * dh..(g * t + j + 1) * dh];
                    block[i * t + j] = dot(qi, kj) * scale;
                }
            }
        });
        let _ = groups;
        out
    });
    finish(&q.tape, "grouped_scores", data, vec![rows, t], q.rg2(k), Op::GroupedScores { q: q.id, k: k.id, t, dh })
}

/// Apply group-local attention weights: `att: [G*t, t]`, `v: [G*t, dh]` ->
/// `[G*t, dh]`, `out[g,i] = sum_j att[g,i,j] * v[g,j]`.
pub fn grouped_apply(att: &Tensor, v: &Tensor, t: usize) -> Result<Tensor> {
    same_tape(att, v)?;
    let (rows, tc) = att.rows_cols()?;
    let (rows2, dh) = v.rows_cols()?;
    if tc != t || rows != rows2 || t == 0 || rows % t != 0 {
        return Err(GusdError::Shape(format!(
            "grouped_apply: att {:?} / v {:?} incompatible with group size {t}",
            att.shape, v.shape
        )));
    }
    let data = att.tape.with_inner(|inner| {
        let a = &inner.nodes[att.id].data;
        let vd = &inner.nodes[v.id].data;
        let mut out = vec![0.0; rows * dh];
        out.par_chunks_mut(t * dh).enumerate().for_each(|(g, block)| {
            for i in 0..t {
                let arow = &a[(g * t + i) * t..(g * t + i + 1) * t];
                let orow = &mut block[i * dh..(i + 1) * dh];
                for (j, &w) in arow.iter().enumerate() {
                    let vrow = &vd[(g * t + j) * dh..(g * t + j + 1) * dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        });
        out
    });
    finish(&att.tape, "grouped_apply", data, vec![rows, dh], att.rg2(v), Op::GroupedApply { att: att.id, v: v.id, t, dh })
}

/// Class-weighted cross-entropy from logits, summed over rows.
/// `weights[i]` multiplies row `i`'s term (class weighting is applied by the caller).
pub fn weighted_ce_loss(logits: &Tensor, labels: &Rc<Vec<u8>>, weights: &Rc<Vec<f64>>) -> Result<Tensor> {
    let (rows, classes) = logits.rows_cols()?;
    if labels.len() != rows || weights.len() != rows {
        return Err(GusdError::Shape(format!(
            "weighted_ce_loss: {} labels / {} weights for {rows} rows",
            labels.len(), weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(GusdError::Integrity(format!("weighted_ce_loss: label {bad} outside 0..{classes}")));
    }
    let total = logits.tape.with_inner(|inner| {
        let z = &inner.nodes[logits.id].data;
        let mut total = 0.0;
        for r in 0..rows {
            let row = &z[r * classes..(r + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            total += weights[r] * (lse - row[labels[r] as usize]);
        }
        total
    });
    finish(
        &logits.tape, "weighted_ce_loss", vec![total], vec![1], logits.requires_grad(),
        Op::WeightedCeLoss { logits: logits.id, labels: labels.clone(), weights: weights.clone(), classes },
    )
}

/// Mean binary cross-entropy over logits with soft targets, numerically stable.
pub fn bce_with_logits_mean(scores: &Tensor, targets: &Rc<Vec<f64>>) -> Result<Tensor> {
    let n = scores.numel();
    if targets.len() != n {
        return Err(GusdError::Shape(format!("bce_with_logits_mean: {} targets for {n} scores", targets.len())));
    }
    if n == 0 {
        return Err(GusdError::Shape("bce_with_logits_mean over zero scores".into()));
    }
    let total = scores.tape.with_inner(|inner| {
        let s = &inner.nodes[scores.id].data;
        let mut total = 0.0;
        for i in 0..n {
            let (si, ti) = (s[i], targets[i]);
            total += si.max(0.0) - si * ti + (-si.abs()).exp().ln_1p();
        }
        total / n as f64
    });
    finish(
        &scores.tape, "bce_with_logits_mean", vec![total], vec![1], scores.requires_grad(),
        Op::BceWithLogitsMean { scores: scores.id, targets: targets.clone() },
    )
}

// ---------------------------------------------------------------------------
// Numeric kernels
// ---------------------------------------------------------------------------

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mx).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

const PAR_FLOPS: usize = 1 << 17;

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let run_row = |i: usize, orow: &mut [f64]| {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| run_row(i, orow));
    } else {
        for (i, orow) in out.chunks_exact_mut(n).enumerate() {
            run_row(i, orow);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

fn add_into(slot: &mut Option<Vec<f64>>, numel: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; numel])
}

/// Propagate `g` (gradient of node `id`'s output) into the gradients of its inputs.
pub(crate) fn backward_step(inner: &TapeInner, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let nodes = &inner.nodes;
    let rg = |i: usize| nodes[i].requires_grad;
    let numel = |i: usize| -> usize { nodes[i].shape.iter().product() };

    match &nodes[id].op {
        Op::Leaf | Op::Param(_) => {}

        Op::Add { a, b } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                for (s, &gi) in ga.iter_mut().zip(g) {
                    *s += gi;
                }
            }
            if rg(*b) {
                let nb = numel(*b);
                let gb = add_into(&mut grads[*b], nb);
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] += gi;
                }
            }
        }
        Op::Sub { a, b } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                for (s, &gi) in ga.iter_mut().zip(g) {
                    *s += gi;
                }
            }
            if rg(*b) {
                let nb = numel(*b);
                let gb = add_into(&mut grads[*b], nb);
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] -= gi;
                }
            }
        }
        Op::Mul { a, b } => {
            let nb = numel(*b);
            if rg(*a) {
                let bd = &nodes[*b].data;
                let ga = add_into(&mut grads[*a], numel(*a));
                for (i, &gi) in g.iter().enumerate() {
                    ga[i] += gi * bd[i % nb];
                }
            }
            if rg(*b) {
                let ad = &nodes[*a].data;
                let gb = add_into(&mut grads[*b], nb);
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] += gi * ad[i];
                }
            }
        }
        Op::ScalarMul { a, c } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                for (s, &gi) in ga.iter_mut().zip(g) {
                    *s += gi * c;
                }
            }
        }
        Op::Neg { a } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                for (s, &gi) in ga.iter_mut().zip(g) {
                    *s -= gi;
                }
            }
        }
        Op::Exp { a } => {
            if rg(*a) {
                let out = &nodes[id].data;
                let ga = add_into(&mut grads[*a], numel(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
        }
        Op::Relu { a } => {
            if rg(*a) {
                let x = &nodes[*a].data;
                let ga = add_into(&mut grads[*a], numel(*a));
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::LeakyRelu { a, slope } => {
            if rg(*a) {
                let x = &nodes[*a].data;
                let ga = add_into(&mut grads[*a], numel(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] * if x[i] >= 0.0 { 1.0 } else { *slope };
                }
            }
        }
        Op::Gelu { a } => {
            if rg(*a) {
                let x = &nodes[*a].data;
                let ga = add_into(&mut grads[*a], numel(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_bwd(x[i]);
                }
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if rg(*a) {
                // dA = G . B^T
                let bd = &nodes[*b].data;
                let ga = add_into(&mut grads[*a], m * k);
                let run = |i: usize, garow: &mut [f64]| {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for (l, s) in garow.iter_mut().enumerate() {
                            *s += gv * bd[l * n + j];
                        }
                    }
                };
                if m * k * n >= PAR_FLOPS {
                    ga.par_chunks_mut(k).enumerate().for_each(|(i, row)| run(i, row));
                } else {
                    for (i, row) in ga.chunks_exact_mut(k).enumerate() {
                        run(i, row);
                    }
                }
            }
            if rg(*b) {
                // dB = A^T . G
                let ad = &nodes[*a].data;
                let gb = add_into(&mut grads[*b], k * n);
                let run = |l: usize, gbrow: &mut [f64]| {
                    for i in 0..m {
                        let av = ad[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        for (s, &gv) in gbrow.iter_mut().zip(grow) {
                            *s += av * gv;
                        }
                    }
                };
                if m * k * n >= PAR_FLOPS {
                    gb.par_chunks_mut(n).enumerate().for_each(|(l, row)| run(l, row));
                } else {
                    for (l, row) in gb.chunks_exact_mut(n).enumerate() {
                        run(l, row);
                    }
                }
            }
        }
        Op::Softmax { a, cols } => {
            if rg(*a) {
                let out = &nodes[id].data;
                let ga = add_into(&mut grads[*a], numel(*a));
                for r in 0..out.len() / cols {
                    let o = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let inner_dot = dot(gr, o);
                    let dst = &mut ga[r * cols..(r + 1) * cols];
                    for c in 0..*cols {
                        dst[c] += o[c] * (gr[c] - inner_dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, cols, stats } => {
            let cols = *cols;
            let rows = numel(*x) / cols;
            let xd = &nodes[*x].data;
            let gd = &nodes[*gamma].data;
            for r in 0..rows {
                let mu = stats[r * 2];
                let inv = stats[r * 2 + 1];
                let xrow = &xd[r * cols..(r + 1) * cols];
                let grow = &g[r * cols..(r + 1) * cols];
                if rg(*beta) {
                    let gb = add_into(&mut grads[*beta], cols);
                    for c in 0..cols {
                        gb[c] += grow[c];
                    }
                }
                if rg(*gamma) {
                    let gg = add_into(&mut grads[*gamma], cols);
                    for c in 0..cols {
                        gg[c] += grow[c] * (xrow[c] - mu) * inv;
                    }
                }
                if rg(*x) {
                    // dxhat = g * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for c in 0..cols {
                        let xh = (xrow[c] - mu) * inv;
                        let dxh = grow[c] * gd[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh /= cols as f64;
                    mean_dxh_xh /= cols as f64;
                    let gx = add_into(&mut grads[*x], rows * cols);
                    let dst = &mut gx[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let xh = (xrow[c] - mu) * inv;
                        let dxh = grow[c] * gd[c];
                        dst[c] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
            }
        }
        Op::MeanRows { a, rows, cols } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], rows * cols);
                let scale = 1.0 / *rows as f64;
                for r in 0..*rows {
                    for c in 0..*cols {
                        ga[r * cols + c] += g[c] * scale;
                    }
                }
            }
        }
        Op::GroupedMeanRows { a, t, cols } => {
            if rg(*a) {
                let n = numel(*a);
                let ga = add_into(&mut grads[*a], n);
                let scale = 1.0 / *t as f64;
                let groups = n / (t * cols);
                for gi in 0..groups {
                    let grow = &g[gi * cols..(gi + 1) * cols];
                    for i in 0..*t {
                        let dst = &mut ga[(gi * t + i) * cols..(gi * t + i + 1) * cols];
                        for c in 0..*cols {
                            dst[c] += grow[c] * scale;
                        }
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                for s in ga.iter_mut() {
                    *s += g[0];
                }
            }
        }
        Op::SumAxis1 { a, rows, cols } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], rows * cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        ga[r * cols + c] += g[r];
                    }
                }
            }
        }
        Op::SumSquares { a } => {
            if rg(*a) {
                let x = &nodes[*a].data;
                let ga = add_into(&mut grads[*a], numel(*a));
                for i in 0..x.len() {
                    ga[i] += 2.0 * x[i] * g[0];
                }
            }
        }
        Op::ConcatCols { inputs, rows, widths } => {
            let total: usize = widths.iter().sum();
            let mut start = 0;
            for (inp, &w) in inputs.iter().zip(widths) {
                if rg(*inp) {
                    let gi = add_into(&mut grads[*inp], rows * w);
                    for r in 0..*rows {
                        for c in 0..w {
                            gi[r * w + c] += g[r * total + start + c];
                        }
                    }
                }
                start += w;
            }
        }
        Op::SliceCols { a, start, len, cols } => {
            if rg(*a) {
                let n = numel(*a);
                let ga = add_into(&mut grads[*a], n);
                let rows = n / cols;
                for r in 0..rows {
                    for c in 0..*len {
                        ga[r * cols + start + c] += g[r * len + c];
                    }
                }
            }
        }
        Op::GatherRows { a, idx, cols } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                for (i, &row) in idx.iter().enumerate() {
                    let dst = &mut ga[row as usize * cols..(row as usize + 1) * cols];
                    let src = &g[i * cols..(i + 1) * cols];
                    for (s, &gv) in dst.iter_mut().zip(src) {
                        *s += gv;
                    }
                }
            }
        }
        Op::ScatterAddRows { srcs, idxs, coeffs, cols } => {
            for ((src, idx), coeff) in srcs.iter().zip(idxs).zip(coeffs) {
                if rg(*src) {
                    let gs = add_into(&mut grads[*src], numel(*src));
                    for (i, &dst) in idx.iter().enumerate() {
                        let w = coeff.as_ref().map_or(1.0, |c| c[i]);
                        let grow = &g[dst as usize * cols..(dst as usize + 1) * cols];
                        let srow = &mut gs[i * cols..(i + 1) * cols];
                        for (s, &gv) in srow.iter_mut().zip(grow) {
                            *s += w * gv;
                        }
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                for (s, &gi) in ga.iter_mut().zip(g) {
                    *s += gi;
                }
            }
        }
        Op::Dropout { a, mask } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] * mask[i];
                }
            }
        }
        Op::ScaleRows { a, w, cols } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                for (r, &wr) in w.iter().enumerate() {
                    for c in 0..*cols {
                        ga[r * cols + c] += g[r * cols + c] * wr;
                    }
                }
            }
        }
        Op::EdgeLogits { s_src, s_dst, edges, slope, heads } => {
            let out = &nodes[id].data;
            let heads = *heads;
            let need_src = rg(*s_src);
            let need_dst = rg(*s_dst);
            let mut gsrc = if need_src { Some(vec![0.0; numel(*s_src)]) } else { None };
            let mut gdst = if need_dst { Some(vec![0.0; numel(*s_dst)]) } else { None };
            let mut eid = 0;
            for dst in 0..edges.n_nodes {
                for &src in edges.in_neighbors(dst) {
                    for h in 0..heads {
                        let f = if out[eid * heads + h] >= 0.0 { 1.0 } else { *slope };
                        let gv = g[eid * heads + h] * f;
                        if let Some(gs) = gsrc.as_mut() {
                            gs[src as usize * heads + h] += gv;
                        }
                        if let Some(gd) = gdst.as_mut() {
                            gd[dst * heads + h] += gv;
                        }
                    }
                    eid += 1;
                }
            }
            if let Some(gs) = gsrc {
                let slot = add_into(&mut grads[*s_src], gs.len());
                for (s, v) in slot.iter_mut().zip(gs) {
                    *s += v;
                }
            }
            if let Some(gd) = gdst {
                let slot = add_into(&mut grads[*s_dst], gd.len());
                for (s, v) in slot.iter_mut().zip(gd) {
                    *s += v;
                }
            }
        }
        Op::EdgeSoftmax { logits, edges, heads } => {
            if rg(*logits) {
                let out = &nodes[id].data;
                let heads = *heads;
                let ga = add_into(&mut grads[*logits], numel(*logits));
                for dst in 0..edges.n_nodes {
                    let (lo, hi) = (edges.offsets[dst] as usize, edges.offsets[dst + 1] as usize);
                    if lo == hi {
                        continue;
                    }
                    for h in 0..heads {
                        let mut inner_dot = 0.0;
                        for eid in lo..hi {
                            inner_dot += g[eid * heads + h] * out[eid * heads + h];
                        }
                        for eid in lo..hi {
                            let o = out[eid * heads + h];
                            ga[eid * heads + h] += o * (g[eid * heads + h] - inner_dot);
                        }
                    }
                }
            }
        }
        Op::EdgeAttnApply { att, wx, edges, heads, cols } => {
            let (heads, cols) = (*heads, *cols);
            let inv_h = 1.0 / heads as f64;
            let att_d = &nodes[*att].data;
            let wx_d = &nodes[*wx].data;
            if rg(*att) {
                let ga = add_into(&mut grads[*att], numel(*att));
                let run = |dst: usize, block: &mut [f64], lo: usize, hi: usize| {
                    for eid in lo..hi {
                        let src = edges.srcs[eid] as usize;
                        let d = dot(&wx_d[src * cols..(src + 1) * cols], &g[dst * cols..(dst + 1) * cols]) * inv_h;
                        for h in 0..heads {
                            block[(eid - lo) * heads + h] += d;
                        }
                    }
                };
                // per-destination edge blocks are disjoint in `ga`
                for dst in 0..edges.n_nodes {
                    let (lo, hi) = (edges.offsets[dst] as usize, edges.offsets[dst + 1] as usize);
                    run(dst, &mut ga[lo * heads..hi * heads], lo, hi);
                }
            }
            if rg(*wx) {
                let gw = add_into(&mut grads[*wx], numel(*wx));
                for dst in 0..edges.n_nodes {
                    let (lo, hi) = (edges.offsets[dst] as usize, edges.offsets[dst + 1] as usize);
                    let grow = &g[dst * cols..(dst + 1) * cols];
                    for eid in lo..hi {
                        let src = edges.srcs[eid] as usize;
                        let w: f64 = att_d[eid * heads..(eid + 1) * heads].iter().sum::<f64>() * inv_h;
                        let dstrow = &mut gw[src * cols..(src + 1) * cols];
                        for (s, &gv) in dstrow.iter_mut().zip(grow) {
                            *s += w * gv;
                        }
                    }
                }
            }
        }
        Op::GroupedScores { q, k, t, dh } => {
            let (t, dh) = (*t, *dh);
            let scale = 1.0 / (dh as f64).sqrt();
            let qd = &nodes[*q].data;
            let kd = &nodes[*k].data;
            let groups = numel(*q) / (t * dh);
            if rg(*q) {
                let gq = add_into(&mut grads[*q], groups * t * dh);
                for gi in 0..groups {
                    for i in 0..t {
                        let dst = &mut gq[(gi * t + i) * dh..(gi * t + i + 1) * dh];
                        for j in 0..t {
                            let gv = g[(gi * t + i) * t + j] * scale;
                            let krow = &kd[(gi * t + j) * dh..(gi * t + j + 1) * dh];
                            for (s, &kv) in dst.iter_mut().zip(krow) {
                                *s += gv * kv;
                            }
                        }
                    }
                }
            }
            if rg(*k) {
                let gk = add_into(&mut grads[*k], groups * t * dh);
                for gi in 0..groups {
                    for j in 0..t {
                        let dst = &mut gk[(gi * t + j) * dh..(gi * t + j + 1) * dh];
                        for i in 0..t {
                            let gv = g[(gi * t + i) * t + j] * scale;
                            let qrow = &qd[(gi * t + i) * dh..(gi * t + i + 1) * dh];
                            for (s, &qv) in dst.iter_mut().zip(qrow) {
                                *s += gv * qv;
                            }
                        }
                    }
                }
            }
        }
        Op::GroupedApply { att, v, t, dh } => {
            let (t, dh) = (*t, *dh);
            let att_d = &nodes[*att].data;
            let vd = &nodes[*v].data;
            let groups = numel(*att) / (t * t);
            if rg(*att) {
                let ga = add_into(&mut grads[*att], groups * t * t);
                for gi in 0..groups {
                    for i in 0..t {
                        let grow = &g[(gi * t + i) * dh..(gi * t + i + 1) * dh];
                        for j in 0..t {
                            let vrow = &vd[(gi * t + j) * dh..(gi * t + j + 1) * dh];
                            ga[(gi * t + i) * t + j] += dot(grow, vrow);
                        }
                    }
                }
            }
            if rg(*v) {
                let gv = add_into(&mut grads[*v], groups * t * dh);
                for gi in 0..groups {
                    for j in 0..t {
                        let dst = &mut gv[(gi * t + j) * dh..(gi * t + j + 1) * dh];
                        for i in 0..t {
                            let w = att_d[(gi * t + i) * t + j];
                            let grow = &g[(gi * t + i) * dh..(gi * t + i + 1) * dh];
                            for (s, &gvv) in dst.iter_mut().zip(grow) {
                                *s += w * gvv;
                            }
                        }
                    }
                }
            }
        }
        Op::SegmentReduce { a, index, kind, cols, argmax } => {
            if rg(*a) {
                let ga = add_into(&mut grads[*a], numel(*a));
                let cols = *cols;
                match kind {
                    SegmentKind::Sum | SegmentKind::Mean => {
                        for s in 0..index.n_segments() {
                            let members = index.segment(s);
                            if members.is_empty() {
                                continue;
                            }
                            let scale = if *kind == SegmentKind::Mean { 1.0 / members.len() as f64 } else { 1.0 };
                            let grow = &g[s * cols..(s + 1) * cols];
                            for &m in members {
                                let dst = &mut ga[m as usize * cols..(m as usize + 1) * cols];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += gv * scale;
                                }
                            }
                        }
                    }
                    SegmentKind::Max => {
                        for s in 0..index.n_segments() {
                            if index.segment(s).is_empty() {
                                continue;
                            }
                            for c in 0..cols {
                                let m = argmax[s * cols + c];
                                ga[m as usize * cols + c] += g[s * cols + c];
                            }
                        }
                    }
                }
            }
        }
        Op::WeightedCeLoss { logits, labels, weights, classes } => {
            if rg(*logits) {
                let z = &nodes[*logits].data;
                let classes = *classes;
                let ga = add_into(&mut grads[*logits], numel(*logits));
                let mut probs = vec![0.0; classes];
                for r in 0..labels.len() {
                    let row = &z[r * classes..(r + 1) * classes];
                    softmax_row(row, &mut probs);
                    let dst = &mut ga[r * classes..(r + 1) * classes];
                    for c in 0..classes {
                        let ind = if c == labels[r] as usize { 1.0 } else { 0.0 };
                        dst[c] += g[0] * weights[r] * (probs[c] - ind);
                    }
                }
            }
        }
        Op::BceWithLogitsMean { scores, targets } => {
            if rg(*scores) {
                let s = &nodes[*scores].data;
                let n = s.len() as f64;
                let ga = add_into(&mut grads[*scores], s.len());
                for i in 0..s.len() {
                    let sig = 1.0 / (1.0 + (-s[i]).exp());
                    ga[i] += g[0] * (sig - targets[i]) / n;
                }
            }
        }
    }
}
