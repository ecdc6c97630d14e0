//! Reverse-mode differentiation over the fixed operation set used by the
//! forecasting model.
//!
//! A [`Tape`] records every executed operation in construction order, which
//! is already topological. [`Tape::backward`] consumes the tape, walks the
//! record in reverse, and accumulates gradients into the [`ParamStore`]
//! slots referenced by parameter leaves. One tape corresponds to one
//! forward pass; build a fresh tape per training iteration.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::entmax;
use crate::error::{CoreError, Result};
use crate::param::ParamStore;
use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Const,
    Param(usize),
    /// `a (2D m x k) * b (2D k x n)`; or one operand 3D batched with the 2D
    /// operand shared across the batch.
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    /// `mul * x + shift` with constant coefficients; only the multiplier
    /// matters for the backward rule.
    Affine(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    /// Adds a vector over the trailing axis.
    AddChannelVec(usize, usize),
    ConcatLast(usize, usize),
    /// Selects entries along axis `rank-2` (the node axis).
    GatherNodes(usize, Vec<usize>),
    /// Row `(i, j)` of the output is `[e_i, e_{idx[j]}]`; builds all pairwise
    /// concatenations of an embedding with a fixed index set without ever
    /// forming an N x N object.
    PairConcat(usize, Vec<usize>),
    SumAll(usize),
    SumLast(usize),
    /// `1 / (1 + x)` elementwise; the degree normalization.
    Inv1p(usize),
    /// Scales slice `[.., i, :]` by `v[i]` along the node axis.
    ScaleNodes(usize, usize),
    /// Applies entmax independently to each column of each `block`-row chunk
    /// of a 2D input.
    EntmaxBlocked {
        input: usize,
        alpha: f64,
        block: usize,
    },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(CoreError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    /// Current value of a recorded variable.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(self.val(self.check(v)?))
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// Records a parameter leaf; gradients reaching it accumulate into the
    /// store slot during [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, slot: usize) -> Var {
        self.push(store.value(slot).clone(), Op::Param(slot))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ai).shape(), self.val(bi).shape());
        let value = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k) = (sa[0], sa[1]);
                let (k2, n) = (sb[0], sb[1]);
                if k != k2 {
                    return Err(self.shape_mismatch("matmul", ai, bi));
                }
                let mut out = Tensor::zeros(&[m, n]);
                mm_nn(m, k, n, self.val(ai).data(), self.val(bi).data(), out.data_mut());
                out
            }
            (2, 3) => {
                let (m, k) = (sa[0], sa[1]);
                let (batch, k2, n) = (sb[0], sb[1], sb[2]);
                if k != k2 {
                    return Err(self.shape_mismatch("matmul", ai, bi));
                }
                let mut out = Tensor::zeros(&[batch, m, n]);
                for bidx in 0..batch {
                    mm_nn(
                        m,
                        k,
                        n,
                        self.val(ai).data(),
                        &self.val(bi).data()[bidx * k * n..(bidx + 1) * k * n],
                        &mut out.data_mut()[bidx * m * n..(bidx + 1) * m * n],
                    );
                }
                out
            }
            (3, 2) => {
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let (k2, n) = (sb[0], sb[1]);
                if k != k2 {
                    return Err(self.shape_mismatch("matmul", ai, bi));
                }
                // The batched rows are contiguous, so the whole product is
                // one (batch * m) x k by k x n multiply.
                let mut out = Tensor::zeros(&[batch, m, n]);
                mm_nn(
                    batch * m,
                    k,
                    n,
                    self.val(ai).data(),
                    self.val(bi).data(),
                    out.data_mut(),
                );
                out
            }
            _ => return Err(self.shape_mismatch("matmul", ai, bi)),
        };
        Ok(self.push(value, Op::Matmul(ai, bi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.zip_same("add", ai, bi, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.zip_same("sub", ai, bi, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(ai, bi)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.zip_same("hadamard", ai, bi, |x, y| x * y)?;
        Ok(self.push(value, Op::Hadamard(ai, bi)))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    /// `mul * x + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, shift: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.val(ai).map(|x| mul * x + shift);
        Ok(self.push(value, Op::Affine(ai, mul)))
    }

    /// `1 - x`; used for the GRU convex combination.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.val(ai).map(stable_sigmoid);
        Ok(self.push(value, Op::Sigmoid(ai)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.val(ai).map(f64::tanh);
        Ok(self.push(value, Op::Tanh(ai)))
    }

    /// Rectifier: `max(x, 0)`.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.val(ai).map(|x| x.max(0.0));
        Ok(self.push(value, Op::Relu(ai)))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.val(ai).map(f64::abs);
        Ok(self.push(value, Op::Abs(ai)))
    }

    /// Adds `v` (rank 1, length = trailing extent of `a`) over the last axis.
    pub fn add_channel_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ai, vi) = (self.check(a)?, self.check(v)?);
        let (sa, sv) = (self.val(ai).shape(), self.val(vi).shape());
        if sa.is_empty() || sv.len() != 1 || sv[0] != *sa.last().unwrap() {
            return Err(self.shape_mismatch("add_channel_vec", ai, vi));
        }
        let c = sv[0];
        let mut value = self.val(ai).clone();
        let vdata = self.val(vi).data().to_vec();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += vdata[i % c];
        }
        Ok(self.push(value, Op::AddChannelVec(ai, vi)))
    }

    /// Concatenates along the trailing axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ai).shape(), self.val(bi).shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(self.shape_mismatch("concat_last", ai, bi));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        let (da, db) = (self.val(ai).data(), self.val(bi).data());
        for r in 0..rows {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(shape, data).expect("concat shape");
        Ok(self.push(value, Op::ConcatLast(ai, bi)))
    }

    /// Gathers slices along the node axis (`rank-2`): 2D `[N, c] -> [M, c]`,
    /// 3D `[B, N, c] -> [B, M, c]`.
    pub fn gather_nodes(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let sa = self.val(ai).shape().to_vec();
        if sa.len() < 2 {
            return Err(CoreError::BadShape {
                op: "gather_nodes",
                expected: "rank >= 2".into(),
                shape: sa,
            });
        }
        let axis = sa.len() - 2;
        let n = sa[axis];
        for &ix in indices {
            if ix >= n {
                return Err(CoreError::IndexOutOfRange {
                    op: "gather_nodes",
                    index: ix,
                    extent: n,
                });
            }
        }
        let c = sa[axis + 1];
        let batch: usize = sa[..axis].iter().product();
        let mut shape = sa.clone();
        shape[axis] = indices.len();
        let mut data = Vec::with_capacity(batch * indices.len() * c);
        let src = self.val(ai).data();
        for b in 0..batch {
            let base = b * n * c;
            for &ix in indices {
                data.extend_from_slice(&src[base + ix * c..base + (ix + 1) * c]);
            }
        }
        let value = Tensor::new(shape, data).expect("gather shape");
        Ok(self.push(value, Op::GatherNodes(ai, indices.to_vec())))
    }

    /// Pairwise concatenation of embedding rows with an index set:
    /// `e: [N, d]` and `M` indices produce `[(N * M), 2d]` where row
    /// `(i, j)` is `[e_i, e_{indices[j]}]`.
    pub fn pair_concat(&mut self, e: Var, indices: &[usize]) -> Result<Var> {
        let ei = self.check(e)?;
        let se = self.val(ei).shape().to_vec();
        if se.len() != 2 {
            return Err(CoreError::BadShape {
                op: "pair_concat",
                expected: "rank 2 embedding".into(),
                shape: se,
            });
        }
        let (n, d) = (se[0], se[1]);
        for &ix in indices {
            if ix >= n {
                return Err(CoreError::IndexOutOfRange {
                    op: "pair_concat",
                    index: ix,
                    extent: n,
                });
            }
        }
        let m = indices.len();
        let src = self.val(ei).data();
        let mut data = Vec::with_capacity(n * m * 2 * d);
        for i in 0..n {
            let row_i = &src[i * d..(i + 1) * d];
            for &j in indices {
                data.extend_from_slice(row_i);
                data.extend_from_slice(&src[j * d..(j + 1) * d]);
            }
        }
        let value = Tensor::new(vec![n * m, 2 * d], data).expect("pair_concat shape");
        Ok(self.push(value, Op::PairConcat(ei, indices.to_vec())))
    }

    /// Sums every element into a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let total: f64 = self.val(ai).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::SumAll(ai)))
    }

    /// Sums over the trailing axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let sa = self.val(ai).shape().to_vec();
        if sa.is_empty() {
            return Err(CoreError::BadShape {
                op: "sum_last",
                expected: "rank >= 1".into(),
                shape: sa,
            });
        }
        let c = *sa.last().unwrap();
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let src = self.val(ai).data();
        let data: Vec<f64> = (0..rows)
            .map(|r| src[r * c..(r + 1) * c].iter().sum())
            .collect();
        let value = Tensor::new(sa[..sa.len() - 1].to_vec(), data).expect("sum_last shape");
        Ok(self.push(value, Op::SumLast(ai)))
    }

    /// `1 / (1 + x)` elementwise.
    pub fn inv1p(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.val(ai).map(|x| 1.0 / (1.0 + x));
        Ok(self.push(value, Op::Inv1p(ai)))
    }

    /// Scales slice `[.., i, :]` of `a` by `v[i]` where `v` has length equal
    /// to the node axis extent (`rank-2`).
    pub fn scale_nodes(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ai, vi) = (self.check(a)?, self.check(v)?);
        let (sa, sv) = (self.val(ai).shape(), self.val(vi).shape());
        if sa.len() < 2 || sv.len() != 1 || sv[0] != sa[sa.len() - 2] {
            return Err(self.shape_mismatch("scale_nodes", ai, vi));
        }
        let n = sa[sa.len() - 2];
        let c = sa[sa.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut value = self.val(ai).clone();
        let vdata = self.val(vi).data().to_vec();
        let out = value.data_mut();
        for b in 0..batch {
            for i in 0..n {
                let base = (b * n + i) * c;
                for x in &mut out[base..base + c] {
                    *x *= vdata[i];
                }
            }
        }
        Ok(self.push(value, Op::ScaleNodes(ai, vi)))
    }

    /// Applies entmax to each column of each consecutive `block`-row chunk of
    /// a 2D input. With input `[(N * block), C]` this normalizes `N * C`
    /// independent vectors of length `block`.
    pub fn entmax_blocked(&mut self, a: Var, alpha: f64, block: usize) -> Result<Var> {
        entmax::validate_alpha(alpha)?;
        let ai = self.check(a)?;
        let sa = self.val(ai).shape().to_vec();
        if sa.len() != 2 || block == 0 || !sa[0].is_multiple_of(block) {
            return Err(CoreError::BadShape {
                op: "entmax_blocked",
                expected: format!("rank 2 with row count divisible by {block}"),
                shape: sa,
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let src = self.val(ai).data();
        let mut data = vec![0.0; rows * cols];
        let mut scratch = vec![0.0; block];
        for chunk in 0..rows / block {
            for col in 0..cols {
                for r in 0..block {
                    scratch[r] = src[(chunk * block + r) * cols + col];
                }
                let p = entmax::entmax(&scratch, alpha)?;
                for r in 0..block {
                    data[(chunk * block + r) * cols + col] = p[r];
                }
            }
        }
        let value = Tensor::new(sa, data).expect("entmax shape");
        Ok(self.push(value, Op::EntmaxBlocked { input: ai, alpha, block }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.val(ai).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(ai)))
    }

    fn zip_same(
        &self,
        op: &'static str,
        ai: usize,
        bi: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.val(ai), self.val(bi));
        if ta.shape() != tb.shape() {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn shape_mismatch(&self, op: &'static str, ai: usize, bi: usize) -> CoreError {
        CoreError::ShapeMismatch {
            op,
            lhs: self.val(ai).shape().to_vec(),
            rhs: self.val(bi).shape().to_vec(),
        }
    }

    /// Runs reverse-mode accumulation from a scalar loss into every reachable
    /// parameter slot of `store`. Consumes the tape; the record is cleared.
    pub fn backward(mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let root = self.check(loss)?;
        if !self.val(root).is_scalar() {
            return Err(CoreError::BadShape {
                op: "backward",
                expected: "scalar loss".into(),
                shape: self.val(root).shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(slot) => store.accumulate_grad(*slot, &g)?,
                Op::Matmul(a, b) => self.backward_matmul(*a, *b, &g, &mut grads),
                Op::Add(a, b) => {
                    add_into(slot_for(&mut grads, *a, self.val(*a).shape()), g.data(), 1.0);
                    add_into(slot_for(&mut grads, *b, self.val(*b).shape()), g.data(), 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(slot_for(&mut grads, *a, self.val(*a).shape()), g.data(), 1.0);
                    add_into(slot_for(&mut grads, *b, self.val(*b).shape()), g.data(), -1.0);
                }
                Op::Hadamard(a, b) => {
                    let (a, b) = (*a, *b);
                    let gb: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.val(b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    add_into(slot_for(&mut grads, a, self.val(a).shape()), &ga, 1.0);
                    add_into(slot_for(&mut grads, b, self.val(b).shape()), &gb, 1.0);
                }
                Op::Affine(a, mul) => {
                    add_into(slot_for(&mut grads, *a, self.val(*a).shape()), g.data(), *mul);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let y = self.val(i).data();
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                        .collect();
                    add_into(slot_for(&mut grads, a, self.val(a).shape()), &d, 1.0);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let y = self.val(i).data();
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect();
                    add_into(slot_for(&mut grads, a, self.val(a).shape()), &d, 1.0);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let x = self.val(a).data();
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_into(slot_for(&mut grads, a, self.val(a).shape()), &d, 1.0);
                }
                Op::Abs(a) => {
                    let a = *a;
                    let x = self.val(a).data();
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| gv * sign(xv))
                        .collect();
                    add_into(slot_for(&mut grads, a, self.val(a).shape()), &d, 1.0);
                }
                Op::AddChannelVec(a, v) => {
                    let (a, v) = (*a, *v);
                    let c = self.val(v).numel();
                    let mut dv = vec![0.0; c];
                    for (idx, &gv) in g.data().iter().enumerate() {
                        dv[idx % c] += gv;
                    }
                    add_into(slot_for(&mut grads, a, self.val(a).shape()), g.data(), 1.0);
                    add_into(slot_for(&mut grads, v, self.val(v).shape()), &dv, 1.0);
                }
                Op::ConcatLast(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = *self.val(a).shape().last().unwrap();
                    let cb = *self.val(b).shape().last().unwrap();
                    let rows = self.val(a).numel() / ca;
                    let mut da = vec![0.0; rows * ca];
                    let mut db = vec![0.0; rows * cb];
                    let gd = g.data();
                    for r in 0..rows {
                        let base = r * (ca + cb);
                        da[r * ca..(r + 1) * ca].copy_from_slice(&gd[base..base + ca]);
                        db[r * cb..(r + 1) * cb].copy_from_slice(&gd[base + ca..base + ca + cb]);
                    }
                    add_into(slot_for(&mut grads, a, self.val(a).shape()), &da, 1.0);
                    add_into(slot_for(&mut grads, b, self.val(b).shape()), &db, 1.0);
                }
                Op::GatherNodes(a, indices) => {
                    let a = *a;
                    let indices = indices.clone();
                    let sa = self.val(a).shape().to_vec();
                    let axis = sa.len() - 2;
                    let n = sa[axis];
                    let c = sa[axis + 1];
                    let batch: usize = sa[..axis].iter().product();
                    let dst = slot_for(&mut grads, a, &sa);
                    let gd = g.data();
                    let dd = dst.data_mut();
                    for b in 0..batch {
                        for (j, &ix) in indices.iter().enumerate() {
                            let src = (b * indices.len() + j) * c;
                            let tgt = (b * n + ix) * c;
                            for o in 0..c {
                                dd[tgt + o] += gd[src + o];
                            }
                        }
                    }
                }
                Op::PairConcat(e, indices) => {
                    let e = *e;
                    let indices = indices.clone();
                    let se = self.val(e).shape().to_vec();
                    let d = se[1];
                    let n = se[0];
                    let m = indices.len();
                    let dst = slot_for(&mut grads, e, &se);
                    let gd = g.data();
                    let dd = dst.data_mut();
                    for i in 0..n {
                        for (j, &ix) in indices.iter().enumerate() {
                            let row = (i * m + j) * 2 * d;
                            for o in 0..d {
                                dd[i * d + o] += gd[row + o];
                                dd[ix * d + o] += gd[row + d + o];
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let gv = g.data()[0];
                    let dst = slot_for(&mut grads, a, self.val(a).shape());
                    for x in dst.data_mut() {
                        *x += gv;
                    }
                }
                Op::SumLast(a) => {
                    let a = *a;
                    let sa = self.val(a).shape().to_vec();
                    let c = *sa.last().unwrap();
                    let dst = slot_for(&mut grads, a, &sa);
                    let dd = dst.data_mut();
                    for (r, &gv) in g.data().iter().enumerate() {
                        for x in &mut dd[r * c..(r + 1) * c] {
                            *x += gv;
                        }
                    }
                }
                Op::Inv1p(a) => {
                    let a = *a;
                    let y = self.val(i).data();
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| -gv * yv * yv)
                        .collect();
                    add_into(slot_for(&mut grads, a, self.val(a).shape()), &d, 1.0);
                }
                Op::ScaleNodes(a, v) => {
                    let (a, v) = (*a, *v);
                    let sa = self.val(a).shape().to_vec();
                    let n = sa[sa.len() - 2];
                    let c = sa[sa.len() - 1];
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    let vdata = self.val(v).data().to_vec();
                    let adata = self.val(a).data().to_vec();
                    let gd = g.data();

                    let mut dv = vec![0.0; n];
                    for b in 0..batch {
                        for i_node in 0..n {
                            let base = (b * n + i_node) * c;
                            for o in 0..c {
                                dv[i_node] += adata[base + o] * gd[base + o];
                            }
                        }
                    }
                    let da: Vec<f64> = gd
                        .iter()
                        .enumerate()
                        .map(|(idx, &gv)| gv * vdata[(idx / c) % n])
                        .collect();
                    add_into(slot_for(&mut grads, a, &sa), &da, 1.0);
                    add_into(slot_for(&mut grads, v, self.val(v).shape()), &dv, 1.0);
                }
                Op::EntmaxBlocked { input, alpha, block } => {
                    let (a, alpha, block) = (*input, *alpha, *block);
                    let sa = self.val(a).shape().to_vec();
                    let (rows, cols) = (sa[0], sa[1]);
                    let p = self.val(i).data();
                    let gd = g.data();
                    let mut da = vec![0.0; rows * cols];
                    let mut p_col = vec![0.0; block];
                    let mut g_col = vec![0.0; block];
                    for chunk in 0..rows / block {
                        for col in 0..cols {
                            for r in 0..block {
                                let idx = (chunk * block + r) * cols + col;
                                p_col[r] = p[idx];
                                g_col[r] = gd[idx];
                            }
                            let d = entmax::entmax_backward(&p_col, &g_col, alpha)?;
                            for r in 0..block {
                                da[(chunk * block + r) * cols + col] = d[r];
                            }
                        }
                    }
                    add_into(slot_for(&mut grads, a, &sa), &da, 1.0);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    add_into(slot_for(&mut grads, a, self.val(a).shape()), g.data(), 1.0);
                }
            }
        }
        self.nodes.clear();
        Ok(())
    }

    fn backward_matmul(&self, a: usize, b: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let sa = self.val(a).shape().to_vec();
        let sb = self.val(b).shape().to_vec();
        match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k) = (sa[0], sa[1]);
                let n = sb[1];
                {
                    let da = slot_for(grads, a, &sa);
                    mm_nt(m, n, k, g.data(), self.val(b).data(), da.data_mut());
                }
                let db = slot_for(grads, b, &sb);
                mm_tn(m, k, n, self.val(a).data(), g.data(), db.data_mut());
            }
            (2, 3) => {
                let (m, k) = (sa[0], sa[1]);
                let (batch, n) = (sb[0], sb[2]);
                {
                    let da = slot_for(grads, a, &sa);
                    for bi in 0..batch {
                        mm_nt(
                            m,
                            n,
                            k,
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &self.val(b).data()[bi * k * n..(bi + 1) * k * n],
                            da.data_mut(),
                        );
                    }
                }
                let db = slot_for(grads, b, &sb);
                for bi in 0..batch {
                    mm_tn(
                        m,
                        k,
                        n,
                        self.val(a).data(),
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &mut db.data_mut()[bi * k * n..(bi + 1) * k * n],
                    );
                }
            }
            (3, 2) => {
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = sb[1];
                {
                    let da = slot_for(grads, a, &sa);
                    mm_nt(batch * m, n, k, g.data(), self.val(b).data(), da.data_mut());
                }
                let db = slot_for(grads, b, &sb);
                mm_tn(batch * m, k, n, self.val(a).data(), g.data(), db.data_mut());
            }
            _ => unreachable!("matmul recorded with unsupported ranks"),
        }
    }
}

fn slot_for<'a>(grads: &'a mut [Option<Tensor>], idx: usize, shape: &[usize]) -> &'a mut Tensor {
    grads[idx].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(dst: &mut Tensor, src: &[f64], factor: f64) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += factor * s;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
