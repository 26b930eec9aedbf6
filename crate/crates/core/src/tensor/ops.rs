//! Forward operations and their backward rules.
//!
//! Each operation validates shapes, computes its value eagerly, and records
//! an [`Op`] that keeps handles to its inputs plus whatever intermediates the
//! backward rule needs. Backward rules receive the output's incoming
//! gradient and accumulate contributions into per-parent buffers.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::shape::{broadcast, broadcast_strides, numel, reduce_to, strides, BroadcastIter};
use super::{msg_slot, Inner, TResult, Tensor, TensorError};

/// Tangent constant of the tanh-form GeLU: sqrt(2/pi).
pub const GELU_C: f64 = 0.7978845608028654;
const GELU_A: f64 = 0.044715;

pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Pow(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    PowScalar(Tensor, f64),
    Matmul(Tensor, Tensor),
    MatmulNT(Tensor, Tensor),
    Softmax(Tensor, usize),
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Concat(Vec<Tensor>, usize),
    Slice { x: Tensor, axis: usize, start: usize },
    SumAll(Tensor),
    MeanAll(Tensor),
    Gather { table: Tensor, ids: Rc<Vec<usize>> },
    Dropout { x: Tensor, keep: Vec<f64> },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Pow(a, b) => vec![a, b],
            Op::Matmul(a, b) | Op::MatmulNT(a, b) => vec![a, b],
            Op::Neg(a) | Op::AddScalar(a) | Op::MulScalar(a, _) | Op::PowScalar(a, _) => vec![a],
            Op::Softmax(a, _) | Op::Gelu(a) | Op::Reshape(a) | Op::Permute(a, _) => vec![a],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::Slice { x, .. } => vec![x],
            Op::SumAll(a) | Op::MeanAll(a) => vec![a],
            Op::Gather { table, .. } => vec![table],
            Op::Dropout { x, .. } => vec![x],
        }
    }

    pub(crate) fn backward(&self, node: &Inner, msg: &[f64], msgs: &mut HashMap<u64, Vec<f64>>) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                ew_backward(a, msg, &node.shape, msgs, |_, _| 1.0, b);
                ew_backward(b, msg, &node.shape, msgs, |_, _| 1.0, a);
            }
            Op::Sub(a, b) => {
                ew_backward(a, msg, &node.shape, msgs, |_, _| 1.0, b);
                ew_backward(b, msg, &node.shape, msgs, |_, _| -1.0, a);
            }
            Op::Mul(a, b) => {
                ew_backward(a, msg, &node.shape, msgs, |_, other| other, b);
                ew_backward(b, msg, &node.shape, msgs, |_, other| other, a);
            }
            Op::Div(a, b) => {
                ew_backward(a, msg, &node.shape, msgs, |_, bv| 1.0 / bv, b);
                ew_backward(b, msg, &node.shape, msgs, |bv, av| -av / (bv * bv), a);
            }
            Op::Pow(a, b) => {
                ew_backward(a, msg, &node.shape, msgs, |av, bv| bv * av.powf(bv - 1.0), b);
                ew_backward(b, msg, &node.shape, msgs, |bv, av| av.powf(bv) * av.ln(), a);
            }
            Op::Neg(a) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    for (o, m) in buf.iter_mut().zip(msg) {
                        *o -= m;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    for (o, m) in buf.iter_mut().zip(msg) {
                        *o += m;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    for (o, m) in buf.iter_mut().zip(msg) {
                        *o += s * m;
                    }
                }
            }
            Op::PowScalar(a, p) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    let av = a.data();
                    for i in 0..buf.len() {
                        buf[i] += msg[i] * p * av[i].powf(p - 1.0);
                    }
                }
            }
            Op::Matmul(a, b) => matmul_backward(a, b, msg, false, msgs),
            Op::MatmulNT(a, b) => matmul_backward(a, b, msg, true, msgs),
            Op::Softmax(a, axis) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    let y = node.data.borrow();
                    let (outer, len, inner) = axis_split(&node.shape, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                let k = base + l * inner;
                                dot += msg[k] * y[k];
                            }
                            for l in 0..len {
                                let k = base + l * inner;
                                buf[k] += (msg[k] - dot) * y[k];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *x.shape().last().unwrap();
                let rows = x.numel() / d;
                let g = gain.data();
                if let Some(buf) = msg_slot(msgs, x) {
                    for r in 0..rows {
                        let row = r * d;
                        let (mut m1, mut m2) = (0.0, 0.0); // means of dxhat and dxhat*xhat
                        for j in 0..d {
                            let dxh = msg[row + j] * g[j];
                            m1 += dxh;
                            m2 += dxh * xhat[row + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = msg[row + j] * g[j];
                            buf[row + j] += inv_std[r] * (dxh - m1 - xhat[row + j] * m2);
                        }
                    }
                }
                if let Some(buf) = msg_slot(msgs, gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += msg[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(buf) = msg_slot(msgs, bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += msg[r * d + j];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    let xs = a.data();
                    for i in 0..buf.len() {
                        let x = xs[i];
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        buf[i] += msg[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    for (o, m) in buf.iter_mut().zip(msg) {
                        *o += m;
                    }
                }
            }
            Op::Permute(a, axes) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    permute_into(msg, &node.shape, &inv, buf, true);
                }
            }
            Op::Concat(parts, axis) => {
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total_width = node.shape[*axis] * inner;
                let outer = msg.len() / total_width;
                let mut col = 0;
                for part in parts {
                    let w = part.shape()[*axis] * inner;
                    if let Some(buf) = msg_slot(msgs, part) {
                        for o in 0..outer {
                            let src = o * total_width + col;
                            let dst = o * w;
                            for j in 0..w {
                                buf[dst + j] += msg[src + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Slice { x, axis, start } => {
                if let Some(buf) = msg_slot(msgs, x) {
                    let inner: usize = x.shape()[axis + 1..].iter().product();
                    let src_width = node.shape[*axis] * inner;
                    let dst_width = x.shape()[*axis] * inner;
                    let outer = msg.len() / src_width;
                    for o in 0..outer {
                        let dst = o * dst_width + start * inner;
                        let src = o * src_width;
                        for j in 0..src_width {
                            buf[dst + j] += msg[src + j];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    for o in buf.iter_mut() {
                        *o += msg[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                if let Some(buf) = msg_slot(msgs, a) {
                    let m = msg[0] / a.numel() as f64;
                    for o in buf.iter_mut() {
                        *o += m;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(buf) = msg_slot(msgs, table) {
                    let d = table.shape()[1];
                    for (row, &id) in ids.iter().enumerate() {
                        let src = row * d;
                        let dst = id * d;
                        for j in 0..d {
                            buf[dst + j] += msg[src + j];
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(buf) = msg_slot(msgs, x) {
                    for i in 0..buf.len() {
                        buf[i] += msg[i] * keep[i];
                    }
                }
            }
        }
    }
}

/// Gradient of one operand of a broadcast elementwise op: multiplies the
/// incoming gradient by `factor(this_i, other_i)` elementwise, then sums
/// back down to the operand's shape. `this` is the operand receiving the
/// gradient; `other` is its partner in the original op.
fn ew_backward(
    this: &Tensor,
    msg: &[f64],
    out_shape: &[usize],
    msgs: &mut HashMap<u64, Vec<f64>>,
    factor: impl Fn(f64, f64) -> f64,
    other: &Tensor,
) {
    if !this.requires_grad() {
        return;
    }
    let full = if this.shape() == out_shape && other.shape() == out_shape {
        let av = this.data();
        let bv = other.data();
        msg.iter().enumerate().map(|(i, m)| m * factor(av[i], bv[i])).collect::<Vec<f64>>()
    } else {
        let av = this.data();
        let bv = other.data();
        let mut full = vec![0.0; msg.len()];
        for (i, (oa, ob)) in BroadcastIter::new(this.shape(), other.shape(), out_shape).enumerate() {
            full[i] = msg[i] * factor(av[oa], bv[ob]);
        }
        full
    };
    let reduced = if this.shape() == out_shape { full } else { reduce_to(&full, out_shape, this.shape()) };
    if let Some(buf) = msg_slot(msgs, this) {
        for (o, r) in buf.iter_mut().zip(&reduced) {
            *o += r;
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copies `src` (shaped `src_shape`) permuted by `axes` into `dst`.
/// `accumulate` selects `+=` (for gradients) over plain assignment.
fn permute_into(src: &[f64], src_shape: &[usize], axes: &[usize], dst: &mut [f64], accumulate: bool) {
    let rank = src_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let in_strides = strides(src_shape);
    // Stride to advance in `src` when the i-th output axis increments.
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for d in dst.iter_mut().take(src.len()) {
        if accumulate {
            *d += src[off];
        } else {
            *d = src[off];
        }
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Layout of a (possibly batched, possibly broadcast) matrix product.
struct MatLayout {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// Per-batch-axis strides into each operand's batch space, in matrices.
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl MatLayout {
    fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let count = numel(&self.batch);
        let mut out = Vec::with_capacity(count);
        let mut idx = vec![0usize; self.batch.len()];
        let (mut oa, mut ob) = (0usize, 0usize);
        for oc in 0..count {
            out.push((oa, ob, oc));
            for ax in (0..self.batch.len()).rev() {
                idx[ax] += 1;
                oa += self.sa[ax];
                ob += self.sb[ax];
                if idx[ax] < self.batch[ax] {
                    break;
                }
                oa -= self.sa[ax] * self.batch[ax];
                ob -= self.sb[ax] * self.batch[ax];
                idx[ax] = 0;
            }
        }
        out
    }
}

fn mat_layout(a: &Tensor, b: &Tensor, transposed_b: bool) -> Result<MatLayout, TensorError> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(TensorError::InnerDim { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let (m, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (kb, n) = if transposed_b {
        (b.shape()[b.rank() - 1], b.shape()[b.rank() - 2])
    } else {
        (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1])
    };
    if ka != kb {
        return Err(TensorError::InnerDim { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let ab = &a.shape()[..a.rank() - 2];
    let bb = &b.shape()[..b.rank() - 2];
    let batch = broadcast(ab, bb)?;
    Ok(MatLayout {
        sa: broadcast_strides(ab, &batch),
        sb: broadcast_strides(bb, &batch),
        batch,
        m,
        k: ka,
        n,
    })
}

fn matmul_backward(a: &Tensor, b: &Tensor, msg: &[f64], transposed_b: bool, msgs: &mut HashMap<u64, Vec<f64>>) {
    let lay = mat_layout(a, b, transposed_b).expect("shapes validated in forward");
    let (m, k, n) = (lay.m, lay.k, lay.n);
    let av = a.to_vec();
    let bv = b.to_vec();
    let offsets = lay.offsets();
    if a.requires_grad() {
        if let Some(buf) = msg_slot(msgs, a) {
            for &(oa, ob, oc) in &offsets {
                let g = &msg[oc * m * n..(oc + 1) * m * n];
                let bs = &bv[ob * k * n..(ob + 1) * k * n];
                let da = &mut buf[oa * m * k..(oa + 1) * m * k];
                if transposed_b {
                    // y = a·bᵀ  =>  da = g·b
                    mm_nn(g, bs, da, m, n, k);
                } else {
                    // y = a·b  =>  da = g·bᵀ
                    mm_nt(g, bs, da, m, n, k);
                }
            }
        }
    }
    if b.requires_grad() {
        if let Some(buf) = msg_slot(msgs, b) {
            for &(oa, ob, oc) in &offsets {
                let g = &msg[oc * m * n..(oc + 1) * m * n];
                let as_ = &av[oa * m * k..(oa + 1) * m * k];
                let db = &mut buf[ob * k * n..(ob + 1) * k * n];
                if transposed_b {
                    // y = a·bᵀ  =>  db = gᵀ·a, laid out [n,k]
                    mm_tn(g, as_, db, n, m, k);
                } else {
                    // y = a·b  =>  db = aᵀ·g
                    mm_tn(as_, g, db, k, m, n);
                }
            }
        }
    }
}

impl Tensor {
    fn ew(&self, other: &Tensor, op: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Vec<usize>), TensorError> {
        let out_shape = broadcast(self.shape(), other.shape())?;
        let av = self.data();
        let bv = other.data();
        let data = if self.shape() == other.shape() {
            av.iter().zip(bv.iter()).map(|(&x, &y)| op(x, y)).collect()
        } else if other.numel() == 1 {
            let y = bv[0];
            av.iter().map(|&x| op(x, y)).collect()
        } else if self.numel() == 1 {
            let x = av[0];
            bv.iter().map(|&y| op(x, y)).collect()
        } else {
            let mut data = Vec::with_capacity(numel(&out_shape));
            for (oa, ob) in BroadcastIter::new(self.shape(), other.shape(), &out_shape) {
                data.push(op(av[oa], bv[ob]));
            }
            data
        };
        Ok((data, out_shape))
    }

    pub fn add(&self, other: &Tensor) -> TResult {
        let (data, shape) = self.ew(other, |a, b| a + b)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::make(data, shape, rg, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> TResult {
        let (data, shape) = self.ew(other, |a, b| a - b)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::make(data, shape, rg, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> TResult {
        let (data, shape) = self.ew(other, |a, b| a * b)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::make(data, shape, rg, Op::Mul(self.clone(), other.clone())))
    }

    /// Elementwise division. Division by zero follows IEEE semantics; no
    /// special casing is done here.
    pub fn div(&self, other: &Tensor) -> TResult {
        let (data, shape) = self.ew(other, |a, b| a / b)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::make(data, shape, rg, Op::Div(self.clone(), other.clone())))
    }

    pub fn pow(&self, other: &Tensor) -> TResult {
        let (data, shape) = self.ew(other, |a, b| a.powf(b))?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::make(data, shape, rg, Op::Pow(self.clone(), other.clone())))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|&x| -x).collect();
        Tensor::make(data, self.shape().to_vec(), self.requires_grad(), Op::Neg(self.clone()))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x + s).collect();
        Tensor::make(data, self.shape().to_vec(), self.requires_grad(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x * s).collect();
        Tensor::make(data, self.shape().to_vec(), self.requires_grad(), Op::MulScalar(self.clone(), s))
    }

    pub fn pow_scalar(&self, p: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x.powf(p)).collect();
        Tensor::make(data, self.shape().to_vec(), self.requires_grad(), Op::PowScalar(self.clone(), p))
    }

    /// Batched matrix product: `[..., m, k] · [..., k, n] -> [..., m, n]`,
    /// leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> TResult {
        let lay = mat_layout(self, other, false)?;
        let (m, k, n) = (lay.m, lay.k, lay.n);
        let av = self.data();
        let bv = other.data();
        let mut out_shape = lay.batch.clone();
        out_shape.extend([m, n]);
        let mut data = vec![0.0; numel(&out_shape)];
        if other.rank() == 2 {
            // Shared right operand (a weight): one big row-merged product.
            let rows = data.len() / n;
            mm_nn(&av[..rows * k], &bv, &mut data, rows, k, n);
        } else {
            for (oa, ob, oc) in lay.offsets() {
                mm_nn(
                    &av[oa * m * k..(oa + 1) * m * k],
                    &bv[ob * k * n..(ob + 1) * k * n],
                    &mut data[oc * m * n..(oc + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::make(data, out_shape, rg, Op::Matmul(self.clone(), other.clone())))
    }

    /// Batched product against a transposed right operand:
    /// `[..., m, k] · [..., n, k]ᵀ -> [..., m, n]`. Used where the transpose
    /// would otherwise have to be materialized (attention scores).
    pub fn matmul_nt(&self, other: &Tensor) -> TResult {
        let lay = mat_layout(self, other, true)?;
        let (m, k, n) = (lay.m, lay.k, lay.n);
        let av = self.data();
        let bv = other.data();
        let mut out_shape = lay.batch.clone();
        out_shape.extend([m, n]);
        let mut data = vec![0.0; numel(&out_shape)];
        for (oa, ob, oc) in lay.offsets() {
            mm_nt(
                &av[oa * m * k..(oa + 1) * m * k],
                &bv[ob * n * k..(ob + 1) * n * k],
                &mut data[oc * m * n..(oc + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::make(data, out_shape, rg, Op::MatmulNT(self.clone(), other.clone())))
    }

    /// Softmax along `axis`, computed with per-lane max subtraction.
    pub fn softmax(&self, axis: usize) -> TResult {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange { axis, rank: self.rank() });
        }
        let x = self.data();
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(x[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (x[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[base + l * inner] /= sum;
                }
            }
        }
        drop(x);
        Ok(Tensor::make(data, self.shape().to_vec(), self.requires_grad(), Op::Softmax(self.clone(), axis)))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the learned affine `gain`/`bias` (both shaped `[d]`).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> TResult {
        let d = *self.shape().last().ok_or(TensorError::AxisOutOfRange { axis: 0, rank: 0 })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch { left: self.shape().to_vec(), right: gain.shape().to_vec() });
        }
        let x = self.data();
        let g = gain.data();
        let b = bias.data();
        let rows = x.len() / d;
        let mut data = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + b[j];
            }
        }
        drop((x, g, b));
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(Tensor::make(
            data,
            self.shape().to_vec(),
            rg,
            Op::LayerNorm { x: self.clone(), gain: gain.clone(), bias: bias.clone(), xhat, inv_std },
        ))
    }

    /// GeLU in its tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        Tensor::make(data, self.shape().to_vec(), self.requires_grad(), Op::Gelu(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> TResult {
        let expected = numel(shape);
        if expected != self.numel() {
            return Err(TensorError::ElementCount { shape: shape.to_vec(), expected, got: self.numel() });
        }
        Ok(Tensor::make_shared(
            Rc::clone(&self.inner.data),
            shape.to_vec(),
            self.requires_grad(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Reorders axes; `axes` lists, for each output axis, the input axis it
    /// takes its data from. The result is materialized contiguously.
    pub fn permute(&self, axes: &[usize]) -> TResult {
        if axes.len() != self.rank() {
            return Err(TensorError::AxisOutOfRange { axis: axes.len(), rank: self.rank() });
        }
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            if a >= self.rank() || seen[a] {
                return Err(TensorError::AxisOutOfRange { axis: a, rank: self.rank() });
            }
            seen[a] = true;
        }
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        permute_into(&src, self.shape(), axes, &mut data, false);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        drop(src);
        Ok(Tensor::make(data, out_shape, self.requires_grad(), Op::Permute(self.clone(), axes.to_vec())))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> TResult {
        let first = parts.first().ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(TensorError::AxisOutOfRange { axis, rank: first.rank() });
        }
        let mut out_shape = first.shape().to_vec();
        for p in &parts[1..] {
            if p.rank() != first.rank()
                || (0..first.rank()).any(|i| i != axis && p.shape()[i] != first.shape()[i])
            {
                return Err(TensorError::ShapeMismatch { left: first.shape().to_vec(), right: p.shape().to_vec() });
            }
            out_shape[axis] += p.shape()[axis];
        }
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let outer: usize = first.shape()[..axis].iter().product();
        let total_width = out_shape[axis] * inner;
        let mut data = vec![0.0; numel(&out_shape)];
        let mut col = 0;
        for p in parts {
            let pv = p.data();
            let w = p.shape()[axis] * inner;
            for o in 0..outer {
                data[o * total_width + col..o * total_width + col + w].copy_from_slice(&pv[o * w..(o + 1) * w]);
            }
            col += w;
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(Tensor::make(data, out_shape, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> TResult {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange { axis, rank: self.rank() });
        }
        let extent = self.shape()[axis];
        if start + len > extent {
            return Err(TensorError::IndexOutOfRange { index: start + len, extent });
        }
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let src_width = extent * inner;
        let dst_width = len * inner;
        let src = self.data();
        let mut data = vec![0.0; outer * dst_width];
        for o in 0..outer {
            let s = o * src_width + start * inner;
            data[o * dst_width..(o + 1) * dst_width].copy_from_slice(&src[s..s + dst_width]);
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        drop(src);
        Ok(Tensor::make(data, out_shape, self.requires_grad(), Op::Slice { x: self.clone(), axis, start }))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::make(vec![s], vec![1], self.requires_grad(), Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel() as f64;
        Tensor::make(vec![s / n], vec![1], self.requires_grad(), Op::MeanAll(self.clone()))
    }

    /// Row lookup into a `[vocab, d]` table; returns `[ids.len(), d]`.
    /// Gradients scatter-add back into the table.
    pub fn gather(&self, ids: &[usize]) -> TResult {
        if self.rank() != 2 {
            return Err(TensorError::Invalid(format!("gather expects a 2-d table, got {:?}", self.shape())));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        let table = self.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, extent: v });
            }
            data.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        drop(table);
        Ok(Tensor::make(
            data,
            vec![ids.len(), d],
            self.requires_grad(),
            Op::Gather { table: self.clone(), ids: Rc::new(ids.to_vec()) },
        ))
    }

    /// Inverted dropout: keeps each element with probability `1-p`, scaling
    /// survivors by `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout(&self, p: f64, rng: &mut impl rand::Rng) -> Tensor {
        if p == 0.0 {
            return self.clone();
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = self.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        Tensor::make(data, self.shape().to_vec(), self.requires_grad(), Op::Dropout { x: self.clone(), keep })
    }
}
