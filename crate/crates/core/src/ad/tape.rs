//! Flat Wengert tape with reverse-mode accumulation.
//!
//! Every operation appends one node holding its forward value. Nodes whose
//! inputs all lack `requires_grad` are stored as constants, so only the part
//! of the graph that can reach a trainable leaf carries a backward rule.
//! [`Tape::backward`] walks the nodes in exact reverse execution order.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    L1(Var),
    L2Norm(Var),
    Cosine(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_left: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        crop_left: usize,
    },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    StraightThrough(Var),
    Stft {
        x: Var,
        n_fft: usize,
        hop: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    warnings: Vec<String>,
    surrogate: bool,
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn fft_plan(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

/// Hann-windowed magnitude spectrogram of `signal`, `frames × (n_fft/2 + 1)`.
pub(crate) fn stft_frames(signal: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<Complex<f64>>> {
    let window = hann(n_fft);
    let fft = fft_plan(n_fft);
    let frames = 1 + (signal.len() - n_fft) / hop;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    (0..frames)
        .map(|f| {
            let seg = &signal[f * hop..f * hop + n_fft];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
                *b = Complex::new(s * w, 0.0);
            }
            fft.process(&mut buf);
            buf[..n_fft / 2 + 1].to_vec()
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose straight-through ops forward their input unchanged, so the
    /// recorded function is the smooth surrogate the backward pass assumes.
    /// Used by [`grad_check`](super::grad_check).
    pub fn surrogate() -> Self {
        Self {
            surrogate: true,
            ..Self::default()
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.warnings.clear();
    }

    /// Warnings recorded during the forward pass (e.g. zero-norm cosine inputs).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant copy of `v`'s value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !is_suffix(av.shape(), bv.shape()) {
            return Err(Error::dim(name, av.shape(), bv.shape()));
        }
        let nb = bv.numel();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `log(1 + exp(x))`, evaluated stably; `-log(sigmoid(x)) == softplus(-x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// `max(x, floor)`; the gradient is passed only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    /// Forwards `round(x)` (half away from zero) and back-propagates identity.
    pub fn round_ste(&mut self, a: Var) -> Var {
        if self.surrogate {
            return self.unary(a, Op::StraightThrough(a), |x| x);
        }
        self.unary(a, Op::StraightThrough(a), f64::round)
    }

    /// Forwards `replacement` and back-propagates the upstream gradient to `a`
    /// unchanged.
    pub fn straight_through(&mut self, a: Var, replacement: Tensor) -> Result<Var> {
        if replacement.shape() != self.shape(a) {
            return Err(Error::dim(
                "straight_through",
                self.shape(a),
                replacement.shape(),
            ));
        }
        if self.surrogate {
            return Ok(self.unary(a, Op::StraightThrough(a), |x| x));
        }
        Ok(self.push(replacement, Op::StraightThrough(a), &[a]))
    }

    // ---- last-axis ops ------------------------------------------------------

    fn last_axis_map(&self, a: Var, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = vec![0.0; av.numel()];
        for (src, dst) in av.data().chunks(d).zip(out.chunks_mut(d)) {
            f(src, dst);
        }
        Tensor::from_parts(av.shape().to_vec(), out)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.last_axis_map(a, |x, y| {
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - m).exp();
                s += *yi;
            }
            y.iter_mut().for_each(|yi| *yi /= s);
        });
        self.push(v, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.last_axis_map(a, |x, y| {
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|&xi| (xi - m).exp()).sum::<f64>().ln();
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = xi - lse;
            }
        });
        self.push(v, Op::LogSoftmax(a), &[a])
    }

    fn reduce_last(&self, a: Var, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let av = self.value(a);
        let d = av.last_dim();
        let data: Vec<f64> = av.data().chunks(d).map(f).collect();
        let shape = av.shape()[..av.rank().saturating_sub(1)].to_vec();
        Tensor::from_parts(shape, data)
    }

    /// L1 norm along the last axis.
    pub fn l1(&mut self, a: Var) -> Var {
        let v = self.reduce_last(a, |r| r.iter().map(|x| x.abs()).sum());
        self.push(v, Op::L1(a), &[a])
    }

    /// Euclidean norm along the last axis.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let v = self.reduce_last(a, |r| r.iter().map(|x| x * x).sum::<f64>().sqrt());
        self.push(v, Op::L2Norm(a), &[a])
    }

    /// Cosine similarity along the last axis. `b` may broadcast over leading
    /// axes of `a`. A zero-norm operand yields 0 and records a warning.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !is_suffix(av.shape(), bv.shape()) || bv.rank() == 0 {
            return Err(Error::dim("cosine_similarity", av.shape(), bv.shape()));
        }
        let d = av.last_dim();
        let nb = bv.numel() / d;
        let mut zero_norm = 0usize;
        let data: Vec<f64> = av
            .data()
            .chunks(d)
            .enumerate()
            .map(|(i, x)| {
                let y = bv.row(i % nb);
                let (dot, nx, ny) = dot_norms(x, y);
                if nx == 0.0 || ny == 0.0 {
                    zero_norm += 1;
                    0.0
                } else {
                    dot / (nx * ny)
                }
            })
            .collect();
        let shape = av.shape()[..av.rank() - 1].to_vec();
        let out = Tensor::from_parts(shape, data);
        if zero_norm > 0 {
            log::warn!("cosine_similarity: {zero_norm} zero-norm operand(s) treated as cosim 0");
            self.warnings
                .push(format!("cosine_similarity: {zero_norm} zero-norm operand(s)"));
        }
        Ok(self.push(out, Op::Cosine(a, b), &[a, b]))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Tensor::scalar(av.sum() / av.numel() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    fn axis_sum(&self, a: Var, axis: usize) -> Result<Tensor> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(Error::dim("sum_axis", av.shape(), &[axis]));
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = av.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (y, x) in dst.iter_mut().zip(src) {
                    *y += x;
                }
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_parts(shape, out))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.axis_sum(a, axis)?;
        Ok(self.push(v, Op::SumAxis(a, axis), &[a]))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1) as f64;
        let v = self.axis_sum(a, axis)?.map(|x| x / n);
        Ok(self.push(v, Op::MeanAxis(a, axis), &[a]))
    }

    // ---- linear algebra and layout -----------------------------------------

    /// `a @ b` with `a: [..., m, k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 2 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        let rows = av.numel() / k;
        let mut out = vec![0.0; rows * n];
        matmul_into(av.data(), bv.data(), &mut out, rows, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let v = self.value(a).transpose_last2();
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(*first).numel() / widths[0];
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Selects rows along the first axis.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 || index.is_empty() {
            return Err(Error::dim("gather", av.shape(), &[index.len()]));
        }
        let n = av.shape()[0];
        let inner = av.numel() / n;
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            if i >= n {
                return Err(Error::dim("gather", av.shape(), &[i]));
            }
            out.extend_from_slice(&av.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = index.len();
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Adds row `k` of `a` into row `index[k]` of a zero tensor with
    /// `out_rows` rows.
    pub fn scatter_add(&mut self, a: Var, index: &[usize], out_rows: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 || av.shape()[0] != index.len() || out_rows == 0 {
            return Err(Error::dim("scatter_add", av.shape(), &[index.len()]));
        }
        let inner = av.numel() / index.len();
        let mut out = vec![0.0; out_rows * inner];
        for (k, &i) in index.iter().enumerate() {
            if i >= out_rows {
                return Err(Error::dim("scatter_add", av.shape(), &[i]));
            }
            for (y, x) in out[i * inner..(i + 1) * inner]
                .iter_mut()
                .zip(&av.data()[k * inner..(k + 1) * inner])
            {
                *y += x;
            }
        }
        let mut shape = av.shape().to_vec();
        shape[0] = out_rows;
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::ScatterAddRows(a, index.to_vec()), &[a]))
    }

    // ---- convolutions -------------------------------------------------------

    /// 1-D convolution. `x: [B, C_in, L]`, `w: [C_out, C_in, K]`, `b: [C_out]`.
    /// Output length is `(L + pad_left + pad_right - K) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 3 || wv.rank() != 3 || xv.shape()[1] != wv.shape()[1] || stride == 0 {
            return Err(Error::dim("conv1d", xv.shape(), wv.shape()));
        }
        let (bsz, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        if len + pad_left + pad_right < k {
            return Err(Error::dim("conv1d", xv.shape(), wv.shape()));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv1d", wv.shape(), self.shape(b)));
            }
        }
        let lout = (len + pad_left + pad_right - k) / stride + 1;
        let mut out = vec![0.0; bsz * cout * lout];
        let wd = wv.data();
        let (ph, plen) = deinterleave(xv.data(), bsz * cin, len, stride);
        let taps: Vec<Tap> = (0..k).map(|kk| Tap::conv(kk, pad_left, stride, len, lout)).collect();
        for bi in 0..bsz {
            for o in 0..cout {
                let y = &mut out[(bi * cout + o) * lout..(bi * cout + o + 1) * lout];
                if let Some(b) = b {
                    y.fill(self.nodes[b.0].value.data()[o]);
                }
                for c in 0..cin {
                    let xs = &ph[(bi * cin + c) * stride * plen..(bi * cin + c + 1) * stride * plen];
                    for (kk, tap) in taps.iter().enumerate() {
                        let wk = wd[(o * cin + c) * k + kk];
                        let src = tap.slice(xs, plen);
                        for (yv, xv) in y[tap.t0..tap.t1].iter_mut().zip(src) {
                            *yv += wk * xv;
                        }
                    }
                }
            }
        }
        let v = Tensor::from_parts(vec![bsz, cout, lout], out);
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(
            v,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            },
            &inputs,
        ))
    }

    /// Transposed 1-D convolution. `x: [B, C_in, L]`, `w: [C_in, C_out, K]`.
    /// Full-length output position `t * stride + k` is shifted left by
    /// `crop_left` and truncated to `out_len`.
    pub fn conv1d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        crop_left: usize,
        out_len: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 3 || wv.rank() != 3 || xv.shape()[1] != wv.shape()[0] || stride == 0 {
            return Err(Error::dim("conv1d_transpose", xv.shape(), wv.shape()));
        }
        let (bsz, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[1], wv.shape()[2]);
        if crop_left + out_len > (len - 1) * stride + k || out_len == 0 {
            return Err(Error::dim("conv1d_transpose", xv.shape(), &[out_len]));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv1d_transpose", wv.shape(), self.shape(b)));
            }
        }
        let wd = wv.data();
        let plen = out_len.div_ceil(stride);
        // Output accumulated per stride phase, interleaved at the end.
        let mut ph = vec![0.0; bsz * cout * stride * plen];
        let taps: Vec<Tap> = (0..k).map(|kk| Tap::tconv(kk, crop_left, stride, len, out_len)).collect();
        for bi in 0..bsz {
            for o in 0..cout {
                let y = &mut ph[(bi * cout + o) * stride * plen..(bi * cout + o + 1) * stride * plen];
                for c in 0..cin {
                    let xs = &xv.data()[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                    for (kk, tap) in taps.iter().enumerate() {
                        let wk = wd[(c * cout + o) * k + kk];
                        let dst = tap.slice_mut(y, plen);
                        for (yv, xv) in dst.iter_mut().zip(&xs[tap.t0..tap.t1]) {
                            *yv += wk * xv;
                        }
                    }
                }
            }
        }
        let mut out = interleave(&ph, bsz * cout, out_len, stride);
        if let Some(b) = b {
            let bd = self.nodes[b.0].value.data();
            for (row, y) in out.chunks_mut(out_len).enumerate() {
                let bias = bd[row % cout];
                y.iter_mut().for_each(|v| *v += bias);
            }
        }
        let v = Tensor::from_parts(vec![bsz, cout, out_len], out);
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(
            v,
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                crop_left,
            },
            &inputs,
        ))
    }

    /// Hann-windowed STFT magnitudes over the last axis: `[..., T]` →
    /// `[..., frames, n_fft/2 + 1]` with `frames = 1 + (T - n_fft) / hop`.
    pub fn stft_mag(&mut self, x: Var, n_fft: usize, hop: usize) -> Result<Var> {
        let xv = self.value(x);
        let t = xv.last_dim();
        if xv.rank() == 0 || t < n_fft || n_fft < 2 || hop == 0 {
            return Err(Error::contract(format!(
                "stft_mag: signal length {t} shorter than fft size {n_fft}"
            )));
        }
        let frames = 1 + (t - n_fft) / hop;
        let bins = n_fft / 2 + 1;
        let mut out = Vec::with_capacity(xv.numel() / t * frames * bins);
        for sig in xv.data().chunks(t) {
            for frame in stft_frames(sig, n_fft, hop) {
                out.extend(frame.iter().map(|c| c.norm()));
            }
        }
        let mut shape = xv.shape()[..xv.rank() - 1].to_vec();
        shape.extend([frames, bins]);
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::Stft { x, n_fft, hop }, &[x]))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a full-shape gradient down to the suffix shape of `v`.
    fn reduce_to(&self, v: Var, g: &[f64]) -> Tensor {
        let shape = self.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for (i, x) in g.iter().enumerate() {
            out[i % n] += x;
        }
        Tensor::from_parts(shape, out)
    }

    fn elementwise(&self, a: Var, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(g.data())
            .map(|(&x, &gi)| f(x, gi))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let gb = self.reduce_to(*b, g.data());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                    let gb = self.reduce_to(*b, &neg);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.numel();
                if self.requires_grad(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, gi)| gi * bv.data()[k % nb])
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
                }
                if self.requires_grad(*b) {
                    let prod: Vec<f64> =
                        g.data().iter().zip(av.data()).map(|(gi, x)| gi * x).collect();
                    let gb = self.reduce_to(*b, &prod);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) | Op::StraightThrough(a) | Op::Reshape(a) => {
                let t = Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec());
                self.accumulate(grads, *a, t);
            }
            Op::Abs(a) => {
                let t = self.elementwise(*a, g, |x, gi| gi * sign(x));
                self.accumulate(grads, *a, t);
            }
            Op::Relu(a) => {
                let t = self.elementwise(*a, g, |x, gi| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, t);
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                let t = self.elementwise(*a, g, |x, gi| if x > floor { gi } else { 0.0 });
                self.accumulate(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = out.zip_map(g, |y, gi| gi * (1.0 - y * y)).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::Sigmoid(a) => {
                let t = out.zip_map(g, |y, gi| gi * y * (1.0 - y)).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::Softplus(a) => {
                let t = self.elementwise(*a, g, |x, gi| gi * sigmoid(x));
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = out.zip_map(g, |y, gi| gi * y).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let t = self.elementwise(*a, g, |x, gi| gi / x);
                self.accumulate(grads, *a, t);
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                let mut data = vec![0.0; out.numel()];
                for ((y, gr), dst) in out
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(data.chunks_mut(d))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in dst.iter_mut().zip(y).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::LogSoftmax(a) => {
                let d = out.last_dim();
                let mut data = vec![0.0; out.numel()];
                for ((y, gr), dst) in out
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(data.chunks_mut(d))
                {
                    let gs: f64 = gr.iter().sum();
                    for ((o, yi), gi) in dst.iter_mut().zip(y).zip(gr) {
                        *o = gi - yi.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut data = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let dst = &mut data[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (y, x) in dst.iter_mut().zip(src) {
                            *y = x * scale;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(shape, data));
            }
            Op::L1(a) => {
                let av = self.value(*a);
                let d = av.last_dim();
                let data = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| g.data()[k / d] * sign(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::L2Norm(a) => {
                let av = self.value(*a);
                let d = av.last_dim();
                let data = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| {
                        let n = out.data()[k / d];
                        if n > 0.0 {
                            g.data()[k / d] * x / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.last_dim();
                let nb = bv.numel() / d;
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                for (r, x) in av.data().chunks(d).enumerate() {
                    let br = r % nb;
                    let y = bv.row(br);
                    let (dot, nx, ny) = dot_norms(x, y);
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let gr = g.data()[r];
                    let cos = dot / (nx * ny);
                    for j in 0..d {
                        ga[r * d + j] += gr * (y[j] / (nx * ny) - cos * x[j] / (nx * nx));
                        gb[br * d + j] += gr * (x[j] / (nx * ny) - cos * y[j] / (ny * ny));
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.numel() / k;
                if self.requires_grad(*a) {
                    // dA = G @ B^T
                    let bt = bv.transpose_last2();
                    let mut ga = vec![0.0; rows * k];
                    matmul_into(g.data(), bt.data(), &mut ga, rows, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.requires_grad(*b) {
                    // dB = A^T @ G
                    let mut gbm = vec![0.0; k * n];
                    let (ad, gd) = (av.data(), g.data());
                    for r in 0..rows {
                        let arow = &ad[r * k..(r + 1) * k];
                        let grow = &gd[r * n..(r + 1) * n];
                        for (kk, &x) in arow.iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            let dst = &mut gbm[kk * n..(kk + 1) * n];
                            for (y, gi) in dst.iter_mut().zip(grow) {
                                *y += x * gi;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gbm));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose_last2());
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.numel() / total;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if self.requires_grad(*p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.accumulate(
                            grads,
                            *p,
                            Tensor::from_parts(self.shape(*p).to_vec(), data),
                        );
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, index) => {
                let av = self.value(*a);
                let inner = av.numel() / av.shape()[0];
                let mut data = vec![0.0; av.numel()];
                for (k, &r) in index.iter().enumerate() {
                    for (y, x) in data[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[k * inner..(k + 1) * inner])
                    {
                        *y += x;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::ScatterAddRows(a, index) => {
                let av = self.value(*a);
                let inner = av.numel() / index.len();
                let mut data = Vec::with_capacity(av.numel());
                for &r in index {
                    data.extend_from_slice(&g.data()[r * inner..(r + 1) * inner]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            } => self.conv1d_backward(*x, *w, *b, *stride, *pad_left, g, grads),
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                crop_left,
            } => self.tconv1d_backward(*x, *w, *b, *stride, *crop_left, g, grads),
            Op::Stft { x, n_fft, hop } => {
                let (n_fft, hop) = (*n_fft, *hop);
                let xv = self.value(*x);
                let t = xv.last_dim();
                let bins = n_fft / 2 + 1;
                let frames = 1 + (t - n_fft) / hop;
                let window = hann(n_fft);
                let fft = fft_plan(n_fft);
                let mut gx = vec![0.0; xv.numel()];
                let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
                for (s, (sig, gsig)) in xv.data().chunks(t).zip(gx.chunks_mut(t)).enumerate() {
                    let spectra = stft_frames(sig, n_fft, hop);
                    for (f, spec) in spectra.iter().enumerate() {
                        let gm = &g.data()[(s * frames + f) * bins..(s * frames + f + 1) * bins];
                        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                        for k in 0..bins {
                            let m = spec[k].norm();
                            if m > 0.0 {
                                buf[k] = spec[k].conj() * (gm[k] / m);
                            }
                        }
                        fft.process(&mut buf);
                        for n in 0..n_fft {
                            gsig[f * hop + n] += window[n] * buf[n].re;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_left: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (bsz, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        let lout = g.shape()[2];
        let (wd, gd) = (wv.data(), g.data());
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let (ph, plen) = deinterleave(xv.data(), bsz * cin, len, stride);
        let mut gph = if need_x { vec![0.0; ph.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; wv.numel()] } else { Vec::new() };
        let taps: Vec<Tap> = (0..k).map(|kk| Tap::conv(kk, pad_left, stride, len, lout)).collect();
        for bi in 0..bsz {
            for o in 0..cout {
                let gy = &gd[(bi * cout + o) * lout..(bi * cout + o + 1) * lout];
                for c in 0..cin {
                    let range = (bi * cin + c) * stride * plen..(bi * cin + c + 1) * stride * plen;
                    for (kk, tap) in taps.iter().enumerate() {
                        let widx = (o * cin + c) * k + kk;
                        let gys = &gy[tap.t0..tap.t1];
                        if need_w {
                            gw[widx] += dot(gys, tap.slice(&ph[range.clone()], plen));
                        }
                        if need_x {
                            let wk = wd[widx];
                            let dst = tap.slice_mut(&mut gph[range.clone()], plen);
                            for (gx, gv) in dst.iter_mut().zip(gys) {
                                *gx += wk * gv;
                            }
                        }
                    }
                }
            }
        }
        let gx = if need_x { interleave(&gph, bsz * cin, len, stride) } else { Vec::new() };
        if need_x {
            self.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        if need_w {
            self.accumulate(grads, w, Tensor::from_parts(wv.shape().to_vec(), gw));
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(gd, bsz, cout, lout));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn tconv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        crop_left: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (bsz, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[1], wv.shape()[2]);
        let out_len = g.shape()[2];
        let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let (gph, plen) = deinterleave(gd, bsz * cout, out_len, stride);
        let mut gx = if need_x { vec![0.0; xv.numel()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; wv.numel()] } else { Vec::new() };
        let taps: Vec<Tap> = (0..k).map(|kk| Tap::tconv(kk, crop_left, stride, len, out_len)).collect();
        for bi in 0..bsz {
            for o in 0..cout {
                let gy = &gph[(bi * cout + o) * stride * plen..(bi * cout + o + 1) * stride * plen];
                for c in 0..cin {
                    let xoff = (bi * cin + c) * len;
                    for (kk, tap) in taps.iter().enumerate() {
                        let widx = (c * cout + o) * k + kk;
                        let gys = tap.slice(gy, plen);
                        if need_w {
                            gw[widx] += dot(&xd[xoff + tap.t0..xoff + tap.t1], gys);
                        }
                        if need_x {
                            let wk = wd[widx];
                            for (gv, g) in gx[xoff + tap.t0..xoff + tap.t1].iter_mut().zip(gys) {
                                *gv += wk * g;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        if need_w {
            self.accumulate(grads, w, Tensor::from_parts(wv.shape().to_vec(), gw));
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(gd, bsz, cout, out_len));
        }
    }
}

fn dot_norms(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    (dot, nx.sqrt(), ny.sqrt())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * n..(r + 1) * n];
        for (kk, &x) in arow.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (y, bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *y += x * bv;
            }
        }
    }
}

fn channel_sums(g: &[f64], bsz: usize, ch: usize, len: usize) -> Tensor {
    let mut out = vec![0.0; ch];
    for bi in 0..bsz {
        for (o, acc) in out.iter_mut().enumerate() {
            *acc += g[(bi * ch + o) * len..(bi * ch + o + 1) * len]
                .iter()
                .sum::<f64>();
        }
    }
    Tensor::from_parts(vec![ch], out)
}

/// Output positions `t` for which input index `t*stride + k - pad` lies in `[0, len)`.
fn conv_range(k: usize, pad: usize, stride: usize, len: usize, lout: usize) -> (usize, usize) {
    let t0 = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest t with t*stride + k - pad <= len - 1
    let lim = len + pad;
    let t1 = if lim <= k { 0 } else { (lim - 1 - k) / stride + 1 };
    (t0.min(lout), t1.min(lout).max(t0.min(lout)))
}

/// Input positions `t` for which output index `t*stride + k - crop` lies in `[0, out_len)`.
fn tconv_range(k: usize, crop: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let t0 = if k >= crop { 0 } else { (crop - k).div_ceil(stride) };
    let lim = out_len + crop;
    let t1 = if lim <= k { 0 } else { (lim - 1 - k) / stride + 1 };
    (t0.min(len), t1.min(len).max(t0.min(len)))
}

/// Valid positions `t0..t1` of one kernel tap and where they land in the
/// phase-split signal: index `t * stride + k - pad` is element `t + off` of
/// phase `phase`.
struct Tap {
    t0: usize,
    t1: usize,
    phase: usize,
    off: isize,
}

impl Tap {
    fn new(k: usize, pad: usize, stride: usize, (t0, t1): (usize, usize)) -> Self {
        let q = k as isize - pad as isize;
        Self {
            t0,
            t1,
            phase: q.rem_euclid(stride as isize) as usize,
            off: q.div_euclid(stride as isize),
        }
    }

    fn conv(k: usize, pad: usize, stride: usize, len: usize, lout: usize) -> Self {
        Self::new(k, pad, stride, conv_range(k, pad, stride, len, lout))
    }

    fn tconv(k: usize, crop: usize, stride: usize, len: usize, out_len: usize) -> Self {
        Self::new(k, crop, stride, tconv_range(k, crop, stride, len, out_len))
    }

    fn span(&self, plen: usize) -> std::ops::Range<usize> {
        let start = (self.phase * plen) as isize + self.t0 as isize + self.off;
        let start = start.max(0) as usize;
        start..start + (self.t1 - self.t0)
    }

    fn slice<'a>(&self, phases: &'a [f64], plen: usize) -> &'a [f64] {
        if self.t1 == self.t0 {
            return &[];
        }
        &phases[self.span(plen)]
    }

    fn slice_mut<'a>(&self, phases: &'a mut [f64], plen: usize) -> &'a mut [f64] {
        if self.t1 == self.t0 {
            return &mut [];
        }
        &mut phases[self.span(plen)]
    }
}

/// Splits each row of `x: [rows, len]` into `stride` phases of `plen =
/// ceil(len / stride)` (zero padded): `[rows, stride, plen]`.
fn deinterleave(x: &[f64], rows: usize, len: usize, stride: usize) -> (Vec<f64>, usize) {
    let plen = len.div_ceil(stride);
    if stride == 1 {
        return (x.to_vec(), plen);
    }
    let mut out = vec![0.0; rows * stride * plen];
    for (r, row) in x.chunks(len).enumerate() {
        let dst = &mut out[r * stride * plen..(r + 1) * stride * plen];
        for (i, &v) in row.iter().enumerate() {
            dst[(i % stride) * plen + i / stride] = v;
        }
    }
    (out, plen)
}

/// Inverse of [`deinterleave`].
fn interleave(ph: &[f64], rows: usize, len: usize, stride: usize) -> Vec<f64> {
    let plen = len.div_ceil(stride);
    if stride == 1 {
        return ph.to_vec();
    }
    let mut out = vec![0.0; rows * len];
    for (r, row) in out.chunks_mut(len).enumerate() {
        let src = &ph[r * stride * plen..(r + 1) * stride * plen];
        for (i, v) in row.iter_mut().enumerate() {
            *v = src[(i % stride) * plen + i / stride];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn round_ste_passes_gradient_through() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.7));
        let y = t.round_ste(x);
        assert_eq!(t.value(y).item(), 1.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(&[1.0, 0.0]));
        let b = t.leaf(Tensor::vector(&[0.0, 1.0]));
        let c = t.cosine_similarity(a, b).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
    }

    #[test]
    fn cosine_zero_norm_records_warning() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(&[0.0, 0.0]));
        let b = t.leaf(Tensor::vector(&[0.0, 1.0]));
        let c = t.cosine_similarity(a, b).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        assert_eq!(t.warnings().len(), 1);
        let g = t.backward(c).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(vec![2, 3]));
        let b = t.leaf(Tensor::zeros(vec![2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn constants_are_not_recorded_with_backward_rules() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(&[1.0, 2.0]));
        let b = t.tanh(a);
        assert!(!t.requires_grad(b));
        let s = t.sum(b);
        let g = t.backward(s).unwrap();
        assert!(g.get(a).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_axis_distributes_uniformly() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        for axis in 0..3 {
            let s = t.sum_axis(a, axis).unwrap();
            let tot = t.sum(s);
            let g = t.backward(tot).unwrap();
            assert!(g.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn softmax_rows_are_on_simplex() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 40.0]).unwrap());
        let s = t.softmax(a);
        for row in t.value(s).rows() {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!(close(row.iter().sum::<f64>(), 1.0, 1e-12));
        }
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let w = t.leaf(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap());
        let y = t.conv1d(x, w, None, 1, 1, 1).unwrap();
        // y[t] = x[t-1] - x[t+1]
        assert_eq!(t.value(y).data(), &[-2.0, -2.0, -2.0, -2.0, 4.0]);
        let y2 = t.conv1d(x, w, None, 2, 0, 0).unwrap();
        assert_eq!(t.value(y2).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> for matching geometry
        let xs = vec![0.3, -1.2, 0.5, 2.0, -0.7, 0.1, 0.9, -0.4];
        let ws: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 3, 8], [xs.clone(), xs.clone(), xs].concat()).unwrap());
        let w = t.constant(Tensor::new(vec![2, 3, 4], ws.clone()).unwrap());
        let y = t.conv1d(x, w, None, 2, 1, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 4]);
        let ys = Tensor::new(vec![1, 2, 4], vec![1.0, -0.5, 0.25, 2.0, 0.0, 1.5, -1.0, 0.5]).unwrap();
        let lhs: f64 = t.value(y).data().iter().zip(ys.data()).map(|(a, b)| a * b).sum();
        let yv = t.constant(ys);
        let xt = t.conv1d_transpose(yv, w, None, 2, 1, 8).unwrap();
        let rhs: f64 = t.value(xt).data().iter().zip(t.value(x).data()).map(|(a, b)| a * b).sum();
        assert!(close(lhs, rhs, 1e-12), "{lhs} vs {rhs}");
    }
}
