//! Matrix-level reverse-mode recording.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to push gradients back to its inputs. Parameters enter the
//! tape by name, so a backward pass yields [`Gradients`] that can be added
//! into any store with the same layout.

use std::collections::HashMap;
use std::sync::Arc;

use super::matrix::{matmul_xwt, Matrix, Real};
use super::params::{Gradients, ParamSource};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous group `[start, start + len)` of a flattened input.
pub type Group = (usize, usize);

enum Op<T> {
    Input,
    Param(String),
    Linear { x: usize, w: usize, b: usize },
    LeakyRelu { x: usize },
    Add { a: usize, b: usize },
    Concat { parts: Vec<usize> },
    Gather { x: usize, index: Arc<[usize]> },
    SegmentMax { x: usize, argmax: Vec<u32> },
    SegmentSum { x: usize, segment: Arc<[usize]> },
    SegmentSoftmax { segment: Arc<[usize]>, segments: usize, x: usize },
    ScaleRows { w: usize, x: usize },
    LogSoftmaxPick { x: usize, groups: Vec<Group>, mask: Vec<bool>, picks: Vec<usize>, probs: Vec<T> },
    BernoulliLogProb { x: usize, groups: Vec<Group>, mask: Vec<bool>, selected: Vec<bool> },
    WeightedSum { x: usize, coeffs: Vec<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn leaky<T: Real>(v: T) -> T {
    if v >= T::zero() {
        v
    } else {
        v * T::from_f64_lossy(LEAKY_SLOPE)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Loads a named parameter as a matrix: shape `(out, in)` stays 2-D, 1-D shapes become a row.
    pub fn param<S: ParamSource<T> + ?Sized>(&mut self, source: &S, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let (shape, values) = source
            .lookup(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        let (rows, cols) = match shape {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => return Err(Error::dim(name, "1-D or 2-D shape", format!("{other:?}"))),
        };
        let v = self.push(
            Matrix::from_vec(rows, cols, values.to_vec()),
            Op::Param(name.to_string()),
        );
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x·Wᵀ + b` with `W: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xm, wm, bm) = (self.value(x), self.value(w), self.value(b));
        if xm.cols != wm.cols {
            return Err(Error::dim("linear input", wm.cols, xm.cols));
        }
        if bm.data.len() != wm.rows {
            return Err(Error::dim("linear bias", wm.rows, bm.data.len()));
        }
        let mut out = Matrix::zeros(xm.rows, wm.rows);
        matmul_xwt(xm, wm, &mut out.data);
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bm.data) {
                *o += *bv;
            }
        }
        Ok(self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }))
    }

    /// Looks up `{name}.w` / `{name}.b` and applies them.
    pub fn dense<S: ParamSource<T> + ?Sized>(&mut self, source: &S, name: &str, x: Var) -> Result<Var> {
        let w = self.param(source, &format!("{name}.w"))?;
        let b = self.param(source, &format!("{name}.b"))?;
        self.linear(x, w, b)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let out = Matrix::from_vec(xm.rows, xm.cols, xm.data.iter().map(|v| leaky(*v)).collect());
        self.push(out, Op::LeakyRelu { x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if (am.rows, am.cols) != (bm.rows, bm.cols) {
            return Err(Error::dim(
                "add",
                format!("{}x{}", am.rows, am.cols),
                format!("{}x{}", bm.rows, bm.cols),
            ));
        }
        let mut out = am.clone();
        out.add_assign(bm);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for p in parts {
            let m = self.value(*p);
            if m.rows != rows {
                return Err(Error::dim("concat rows", rows, m.rows));
            }
            cols += m.cols;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        Ok(self.push(out, Op::Concat { parts: parts.iter().map(|p| p.0).collect() }))
    }

    /// Row gather: `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let xm = self.value(x);
        let mut out = Matrix::zeros(index.len(), xm.cols);
        for (i, &src) in index.iter().enumerate() {
            if src >= xm.rows {
                return Err(Error::dim("gather index", format!("< {}", xm.rows), src));
            }
            out.row_mut(i).copy_from_slice(xm.row(src));
        }
        Ok(self.push(out, Op::Gather { x: x.0, index }))
    }

    /// Element-wise max of the rows sharing a segment id; empty segments yield zero.
    pub fn segment_max(&mut self, x: Var, segment: &[usize], segments: usize) -> Result<Var> {
        let xm = self.value(x);
        if segment.len() != xm.rows {
            return Err(Error::dim("segment_max ids", xm.rows, segment.len()));
        }
        let cols = xm.cols;
        let mut out = Matrix::zeros(segments, cols);
        let mut argmax = vec![u32::MAX; segments * cols];
        for (r, &s) in segment.iter().enumerate() {
            if s >= segments {
                return Err(Error::dim("segment id", format!("< {segments}"), s));
            }
            let row = xm.row(r);
            for (c, &v) in row.iter().enumerate() {
                let slot = s * cols + c;
                if argmax[slot] == u32::MAX || v > out.data[slot] {
                    out.data[slot] = v;
                    argmax[slot] = r as u32;
                }
            }
        }
        Ok(self.push(out, Op::SegmentMax { x: x.0, argmax }))
    }

    pub fn segment_sum(&mut self, x: Var, segment: Arc<[usize]>, segments: usize) -> Result<Var> {
        let xm = self.value(x);
        if segment.len() != xm.rows {
            return Err(Error::dim("segment_sum ids", xm.rows, segment.len()));
        }
        let mut out = Matrix::zeros(segments, xm.cols);
        for (r, &s) in segment.iter().enumerate() {
            let row = xm.row(r);
            for (o, v) in out.row_mut(s).iter_mut().zip(row) {
                *o += *v;
            }
        }
        Ok(self.push(out, Op::SegmentSum { x: x.0, segment }))
    }

    /// Softmax of a column vector within each segment.
    pub fn segment_softmax(&mut self, x: Var, segment: Arc<[usize]>, segments: usize) -> Result<Var> {
        let xm = self.value(x);
        if xm.cols != 1 || segment.len() != xm.rows {
            return Err(Error::dim("segment_softmax", format!("{}x1", segment.len()), format!("{}x{}", xm.rows, xm.cols)));
        }
        let mut max = vec![T::neg_infinity(); segments];
        for (r, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(xm.data[r]);
        }
        let mut sum = vec![T::zero(); segments];
        let mut out: Vec<T> = segment
            .iter()
            .enumerate()
            .map(|(r, &s)| {
                let e = (xm.data[r] - max[s]).exp();
                sum[s] += e;
                e
            })
            .collect();
        for (o, &s) in out.iter_mut().zip(segment.iter()) {
            *o = *o / sum[s];
        }
        let out = Matrix::column(out);
        Ok(self.push(out, Op::SegmentSoftmax { segment, segments, x: x.0 }))
    }

    /// `out[i] = w[i] · x[i]` for a column `w`.
    pub fn scale_rows(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wm, xm) = (self.value(w), self.value(x));
        if wm.cols != 1 || wm.rows != xm.rows {
            return Err(Error::dim("scale_rows", format!("{}x1", xm.rows), format!("{}x{}", wm.rows, wm.cols)));
        }
        let mut out = xm.clone();
        for r in 0..out.rows {
            let s = wm.data[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::ScaleRows { w: w.0, x: x.0 }))
    }

    /// Per group: log-softmax over unmasked entries of the flattened input, evaluated at `picks[g]`.
    /// Produces a column with one entry per group.
    pub fn log_softmax_pick(&mut self, x: Var, groups: Vec<Group>, mask: Vec<bool>, picks: Vec<usize>) -> Result<Var> {
        let xm = self.value(x);
        if mask.len() != xm.data.len() || picks.len() != groups.len() {
            return Err(Error::dim("log_softmax_pick", xm.data.len(), mask.len()));
        }
        let mut probs = vec![T::zero(); xm.data.len()];
        let mut out = Vec::with_capacity(groups.len());
        for (&(start, len), &pick) in groups.iter().zip(&picks) {
            if start + len > xm.data.len() {
                return Err(Error::dim("log_softmax_pick group", xm.data.len(), start + len));
            }
            if pick >= len {
                return Err(Error::dim("log_softmax_pick pick", format!("< {len}"), pick));
            }
            let slice = &xm.data[start..start + len];
            let m = &mask[start..start + len];
            if !m[pick] {
                return Err(Error::NoValidChoice);
            }
            let max = slice
                .iter()
                .zip(m)
                .filter(|(_, ok)| **ok)
                .map(|(v, _)| *v)
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (i, (&v, &ok)) in slice.iter().zip(m).enumerate() {
                if ok {
                    let e = (v - max).exp();
                    probs[start + i] = e;
                    sum += e;
                }
            }
            for p in &mut probs[start..start + len] {
                *p = *p / sum;
            }
            out.push(slice[pick] - max - sum.ln());
        }
        Ok(self.push(
            Matrix::column(out),
            Op::LogSoftmaxPick { x: x.0, groups, mask, picks, probs },
        ))
    }

    /// Per group: Σ log σ(x) over selected rows plus Σ log(1−σ(x)) over unselected rows,
    /// masked rows excluded (their probability is pinned at zero).
    pub fn bernoulli_log_prob(&mut self, x: Var, groups: Vec<Group>, mask: Vec<bool>, selected: Vec<bool>) -> Result<Var> {
        let xm = self.value(x);
        if xm.cols != 1 || mask.len() != xm.rows || selected.len() != xm.rows {
            return Err(Error::dim("bernoulli_log_prob", xm.rows, selected.len()));
        }
        let mut out = Vec::with_capacity(groups.len());
        for &(start, len) in &groups {
            let mut total = 0.0;
            for i in start..start + len {
                if !mask[i] {
                    if selected[i] {
                        return Err(Error::NoValidChoice);
                    }
                    continue;
                }
                let s = xm.data[i].to_f64_lossy();
                total -= if selected[i] { softplus(-s) } else { softplus(s) };
            }
            out.push(T::from_f64_lossy(total));
        }
        Ok(self.push(
            Matrix::column(out),
            Op::BernoulliLogProb { x: x.0, groups, mask, selected },
        ))
    }

    /// `Σ coeffs[i] · x[i]` over the flattened input, as a 1×1 value.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Vec<T>) -> Result<Var> {
        let xm = self.value(x);
        if coeffs.len() != xm.data.len() {
            return Err(Error::dim("weighted_sum", xm.data.len(), coeffs.len()));
        }
        let total = xm.data.iter().zip(&coeffs).map(|(a, b)| *a * *b).sum();
        Ok(self.push(Matrix::from_vec(1, 1, vec![total]), Op::WeightedSum { x: x.0, coeffs }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).data.len();
        self.weighted_sum(x, vec![T::one(); n])
    }

    /// Propagates `seeds` (one gradient matrix per output) back to every parameter leaf.
    ///
    /// The tape is left intact, so several backward passes with different seeds may
    /// run over one recorded forward computation.
    pub fn backward(&self, seeds: &[(Var, Matrix<T>)]) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward computation".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            let node = self
                .nodes
                .get(v.0)
                .ok_or_else(|| Error::State(format!("seed refers to unrecorded value {}", v.0)))?;
            if (node.value.rows, node.value.cols) != (seed.rows, seed.cols) {
                return Err(Error::dim(
                    "backward seed",
                    format!("{}x{}", node.value.rows, node.value.cols),
                    format!("{}x{}", seed.rows, seed.cols),
                ));
            }
            accumulate(&mut grads[v.0], seed.clone());
        }
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);

        let mut out = Gradients::default();
        for idx in (0..=top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => out.insert_or_add(name, &g.data),
                Op::Linear { x, w, b } => {
                    let (xm, wm) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    // dX = dY · W
                    let mut dx = Matrix::zeros(xm.rows, xm.cols);
                    T::gemm(
                        g.rows, g.cols, wm.cols, &g.data, g.cols as isize, 1, &wm.data,
                        wm.cols as isize, 1, T::zero(), &mut dx.data,
                    );
                    // dW = dYᵀ · X
                    let mut dw = Matrix::zeros(wm.rows, wm.cols);
                    T::gemm(
                        g.cols, g.rows, xm.cols, &g.data, 1, g.cols as isize, &xm.data,
                        xm.cols as isize, 1, T::zero(), &mut dw.data,
                    );
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, v) in db.data.iter_mut().zip(g.row(r)) {
                            *acc += *v;
                        }
                    }
                    let bm = &self.nodes[*b].value;
                    let db = Matrix::from_vec(bm.rows, bm.cols, db.data);
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*w], dw);
                    accumulate(&mut grads[*b], db);
                }
                Op::LeakyRelu { x } => {
                    let xm = &self.nodes[*x].value;
                    let slope = T::from_f64_lossy(LEAKY_SLOPE);
                    let mut dx = g;
                    for (d, v) in dx.data.iter_mut().zip(&xm.data) {
                        if *v < T::zero() {
                            *d *= slope;
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[*p].value.cols;
                        let mut dp = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads[*p], dp);
                    }
                }
                Op::Gather { x, index } => {
                    let xm = &self.nodes[*x].value;
                    let mut dx = Matrix::zeros(xm.rows, xm.cols);
                    for (i, &src) in index.iter().enumerate() {
                        for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *d += *v;
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::SegmentMax { x, argmax } => {
                    let xm = &self.nodes[*x].value;
                    let cols = xm.cols;
                    let mut dx = Matrix::zeros(xm.rows, cols);
                    for (slot, &src) in argmax.iter().enumerate() {
                        if src != u32::MAX {
                            dx.data[src as usize * cols + slot % cols] += g.data[slot];
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::SegmentSum { x, segment } => {
                    let xm = &self.nodes[*x].value;
                    let mut dx = Matrix::zeros(xm.rows, xm.cols);
                    for (r, &s) in segment.iter().enumerate() {
                        dx.row_mut(r).copy_from_slice(g.row(s));
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::SegmentSoftmax { segment, segments, x } => {
                    let y = &node.value.data;
                    let mut dot = vec![T::zero(); *segments];
                    for (r, &s) in segment.iter().enumerate() {
                        dot[s] += y[r] * g.data[r];
                    }
                    let dx = segment
                        .iter()
                        .enumerate()
                        .map(|(r, &s)| y[r] * (g.data[r] - dot[s]))
                        .collect();
                    accumulate(&mut grads[*x], Matrix::column(dx));
                }
                Op::ScaleRows { w, x } => {
                    let (wm, xm) = (&self.nodes[*w].value, &self.nodes[*x].value);
                    let mut dw = Matrix::zeros(wm.rows, 1);
                    let mut dx = Matrix::zeros(xm.rows, xm.cols);
                    for r in 0..xm.rows {
                        let (gr, xr) = (g.row(r), xm.row(r));
                        dw.data[r] = gr.iter().zip(xr).map(|(a, b)| *a * *b).sum();
                        let s = wm.data[r];
                        for (d, gv) in dx.row_mut(r).iter_mut().zip(gr) {
                            *d = *gv * s;
                        }
                    }
                    accumulate(&mut grads[*w], dw);
                    accumulate(&mut grads[*x], dx);
                }
                Op::LogSoftmaxPick { x, groups, mask, picks, probs } => {
                    let xm = &self.nodes[*x].value;
                    let mut dx = Matrix::zeros(xm.rows, xm.cols);
                    for (gi, (&(start, len), &pick)) in groups.iter().zip(picks).enumerate() {
                        let up = g.data[gi];
                        for i in start..start + len {
                            if mask[i] {
                                dx.data[i] -= up * probs[i];
                            }
                        }
                        dx.data[start + pick] += up;
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::BernoulliLogProb { x, groups, mask, selected } => {
                    let xm = &self.nodes[*x].value;
                    let mut dx = Matrix::zeros(xm.rows, 1);
                    for (gi, &(start, len)) in groups.iter().enumerate() {
                        let up = g.data[gi].to_f64_lossy();
                        for i in start..start + len {
                            if !mask[i] {
                                continue;
                            }
                            let p = sigmoid(xm.data[i].to_f64_lossy());
                            let d = if selected[i] { 1.0 - p } else { -p };
                            dx.data[i] = T::from_f64_lossy(up * d);
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::WeightedSum { x, coeffs } => {
                    let xm = &self.nodes[*x].value;
                    let up = g.data[0];
                    let dx = Matrix::from_vec(xm.rows, xm.cols, coeffs.iter().map(|c| *c * up).collect());
                    accumulate(&mut grads[*x], dx);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
