//! Reverse-mode differentiation over a linear operation trace.
//!
//! Every op appends one node holding its output value. Inputs always have a
//! smaller index than the node that consumes them, so the node list is a
//! topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::{broadcast_shape, for_each_broadcast, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Gradient is routed to the first (lowest-index) maximum.
    Max,
    LogSumExp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length for any width and dilation.
    Same,
    Valid,
}

/// One output column of a linear interpolation: `(1 − frac)·x[lo] + frac·x[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpTap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

enum Op<T: Real> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Clamp { x: Var, lo: T, hi: T },
    Affine { x: Var, scale: T },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reduce { x: Var, axis: usize, op: ReduceOp, argmax: Vec<usize> },
    SumAll(Var),
    Conv1d { x: Var, w: Var, geom: ConvGeom },
    Frames { x: Var, win: usize, hop: usize },
    PowerSpectrum { x: Var, n_fft: usize, fft: Arc<dyn Fft<T>> },
    Interp { x: Var, taps: Arc<[InterpTap<T>]> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(..) => "binary",
            Op::Unary(..) => "unary",
            Op::Clamp { .. } => "clamp",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Reduce { .. } => "reduce",
            Op::SumAll(..) => "sum_all",
            Op::Conv1d { .. } => "conv1d",
            Op::Frames { .. } => "frames",
            Op::PowerSpectrum { .. } => "power_spectrum",
            Op::Interp { .. } => "interp",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::Unary(_, x)
            | Op::Clamp { x, .. }
            | Op::Affine { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Reduce { x, .. }
            | Op::SumAll(x)
            | Op::Frames { x, .. }
            | Op::PowerSpectrum { x, .. }
            | Op::Interp { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation trace. One tape per logical thread of work.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    planner: FftPlanner<T>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf variable.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<usize, Tensor<T>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var.0)
    }

    /// Gradient of `var`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Number of recorded ops replayed during the backward sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            planner: FftPlanner::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in recording order.
    pub fn trace(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Every recorded variable in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Input variables of a recorded node.
    pub fn inputs_of(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).map_err(|_| TensorError::ShapeMismatch {
            op: match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            },
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if op == BinaryOp::Div {
            if let Some(i) = vb.iter().position(|v| *v == T::zero()) {
                return Err(TensorError::Domain {
                    op: "div",
                    index: i,
                    value: 0.0,
                });
            }
        }
        let n: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); n];
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(va).zip(vb) {
                *o = f(x, y);
            }
        } else {
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(va[i], vb[j]));
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let v = self.value(x);
        if matches!(op, UnaryOp::Log | UnaryOp::Sqrt) {
            if let Some(i) = v.data().iter().position(|&e| !(e > T::zero())) {
                return Err(TensorError::Domain {
                    op: if op == UnaryOp::Log { "log" } else { "sqrt" },
                    index: i,
                    value: v.data()[i].as_f64(),
                });
            }
        }
        let value = match op {
            UnaryOp::Neg => v.map(|e| -e),
            UnaryOp::Exp => v.map(|e| e.exp()),
            UnaryOp::Log => v.map(|e| e.ln()),
            UnaryOp::Sqrt => v.map(|e| e.sqrt()),
            UnaryOp::Abs => v.map(|e| e.abs()),
            UnaryOp::Relu => v.map(|e| if e > T::zero() { e } else { T::zero() }),
            UnaryOp::Tanh => v.map(|e| e.tanh()),
            UnaryOp::Sigmoid => v.map(|e| T::one() / (T::one() + (-e).exp())),
        };
        Ok(self.push(value, Op::Unary(op, x)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Neg, x).expect("neg is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Abs, x).expect("abs is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x).expect("relu is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// `x · sigmoid(x)`
    pub fn swish(&mut self, x: Var) -> Var {
        let s = self.sigmoid(x);
        self.mul(x, s).expect("same shape")
    }

    /// Clamps to `[lo, hi]`; the gradient passes only where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|e| e.max(lo).min(hi));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|e| scale * e + shift);
        self.push(value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.affine(x, c, T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.affine(x, T::one(), c)
    }

    // ── linear algebra and layout ────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(x).data(), r, c);
        let value = Tensor::new(&[c, r], data)?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Reduces along `axis`, keeping it with extent 1.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "reduce",
                msg: "empty axis".into(),
            });
        }
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for o in 0..outer {
                    for j in 0..n {
                        let row = &data[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let inv = T::one() / T::lit(n as f64);
                    out.iter_mut().for_each(|v| *v = *v * inv);
                }
            }
            ReduceOp::Max | ReduceOp::LogSumExp => {
                argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = data[o * n * inner + i];
                        let mut at = 0;
                        for j in 1..n {
                            let v = data[(o * n + j) * inner + i];
                            if v > best {
                                best = v;
                                at = j;
                            }
                        }
                        argmax[o * inner + i] = at;
                        out[o * inner + i] = if op == ReduceOp::Max {
                            best
                        } else {
                            let s: T = (0..n)
                                .map(|j| (data[(o * n + j) * inner + i] - best).exp())
                                .sum();
                            best + s.ln()
                        };
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Reduce {
                x,
                axis,
                op,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Max, x, axis)
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::LogSumExp, x, axis)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    // ── signal ops ───────────────────────────────────────────────────

    /// Dilated cross-correlation of `x: [c_in × len]` with `w: [c_out × c_in × width]`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize, padding: Padding) -> Result<Var> {
        if dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                msg: "dilation must be positive".into(),
            });
        }
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (c_in, len_in, c_out, width) = (sx[0], sx[1], sw[0], sw[2]);
        let span = dilation * (width.max(1) - 1);
        let (len_out, pad_left) = match padding {
            Padding::Same => (len_in, span / 2),
            Padding::Valid => {
                if len_in <= span {
                    return Err(TensorError::InvalidArgument {
                        op: "conv1d",
                        msg: format!("input length {len_in} too short for span {span}"),
                    });
                }
                (len_in - span, 0)
            }
        };
        let geom = ConvGeom {
            c_in,
            c_out,
            width,
            len_in,
            len_out,
            dilation,
            pad_left,
        };
        let data = kernels::conv1d(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(&[c_out, len_out], data)?;
        Ok(self.push(value, Op::Conv1d { x, w, geom }))
    }

    /// Slices a 1-D signal into overlapping frames `[n_frames × win]`.
    pub fn frames(&mut self, x: Var, win: usize, hop: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 || win == 0 || hop == 0 || s[0] < win {
            return Err(TensorError::InvalidArgument {
                op: "frames",
                msg: format!("cannot frame shape {s:?} with win {win} hop {hop}"),
            });
        }
        let n_frames = (s[0] - win) / hop + 1;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n_frames * win);
        for f in 0..n_frames {
            data.extend_from_slice(&src[f * hop..f * hop + win]);
        }
        let value = Tensor::new(&[n_frames, win], data)?;
        Ok(self.push(value, Op::Frames { x, win, hop }))
    }

    /// One-sided power spectrum `|FFT(row)|²` of each row, zero-padded to `n_fft`.
    pub fn power_spectrum(&mut self, x: Var, n_fft: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] > n_fft || n_fft < 2 {
            return Err(TensorError::InvalidArgument {
                op: "power_spectrum",
                msg: format!("shape {s:?} incompatible with n_fft {n_fft}"),
            });
        }
        let fft = self.planner.plan_fft_forward(n_fft);
        let bins = n_fft / 2 + 1;
        let mut out = Vec::with_capacity(s[0] * bins);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        for row in self.value(x).data().chunks(s[1].max(1)).take(s[0]) {
            spectrum_of(row, &mut buf, fft.as_ref());
            out.extend(buf[..bins].iter().map(|c| c.re * c.re + c.im * c.im));
        }
        let value = Tensor::new(&[s[0], bins], out)?;
        Ok(self.push(value, Op::PowerSpectrum { x, n_fft, fft }))
    }

    /// Linear interpolation of the columns of `x: [c × f]` at the given taps.
    pub fn interp(&mut self, x: Var, taps: Arc<[InterpTap<T>]>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || taps.iter().any(|t| t.lo >= s[1] || t.hi >= s[1]) {
            return Err(TensorError::InvalidArgument {
                op: "interp",
                msg: format!("taps out of range for shape {s:?}"),
            });
        }
        let (c, f) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * taps.len());
        for row in src.chunks(f) {
            data.extend(
                taps.iter()
                    .map(|t| row[t.lo] * (T::one() - t.frac) + row[t.hi] * t.frac),
            );
        }
        let value = Tensor::new(&[c, taps.len()], data)?;
        Ok(self.push(value, Op::Interp { x, taps }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates d(loss)/d(leaf) for every leaf recorded with [`Tape::param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        let mut out = BTreeMap::new();
        let mut visited = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: out, visited });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            if let Op::Leaf = node.op {
                out.insert(idx, Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads: out,
            visited,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (da, db) = (va.data(), vb.data());
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); va.numel()];
                    for_each_broadcast(out_shape, sa, sb, |o, i, j| {
                        let d = match op {
                            BinaryOp::Add | BinaryOp::Sub => g[o],
                            BinaryOp::Mul => g[o] * db[j],
                            BinaryOp::Div => g[o] / db[j],
                        };
                        ga[i] = ga[i] + d;
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); vb.numel()];
                    for_each_broadcast(out_shape, sa, sb, |o, i, j| {
                        let d = match op {
                            BinaryOp::Add => g[o],
                            BinaryOp::Sub => -g[o],
                            BinaryOp::Mul => g[o] * da[i],
                            BinaryOp::Div => -g[o] * da[i] / (db[j] * db[j]),
                        };
                        gb[j] = gb[j] + d;
                    });
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Unary(op, x) => {
                if !self.wants(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let two = T::lit(2.0);
                let gx: Vec<T> = (0..g.len())
                    .map(|i| match op {
                        UnaryOp::Neg => -g[i],
                        UnaryOp::Exp => g[i] * yv[i],
                        UnaryOp::Log => g[i] / xv[i],
                        UnaryOp::Sqrt => g[i] / (two * yv[i]),
                        UnaryOp::Abs => {
                            if xv[i] > T::zero() {
                                g[i]
                            } else if xv[i] < T::zero() {
                                -g[i]
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Relu => {
                            if xv[i] > T::zero() {
                                g[i]
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Tanh => g[i] * (T::one() - yv[i] * yv[i]),
                        UnaryOp::Sigmoid => g[i] * yv[i] * (T::one() - yv[i]),
                    })
                    .collect();
                accumulate(&mut grads[x.0], gx);
            }
            Op::Clamp { x, lo, hi } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Affine { x, scale } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.iter().map(|&v| v * *scale).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let ga = kernels::matmul_bt(g, self.value(*b).data(), m, n, k);
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_at(self.value(*a).data(), g, m, k, n);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = (out_shape[0], out_shape[1]);
                    accumulate(&mut grads[x.0], kernels::transpose(g, r, c));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let extent = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(outer * extent * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + extent * inner]);
                        }
                        accumulate(&mut grads[p.0], gp);
                    }
                    offset += extent;
                }
            }
            Op::Reduce {
                x,
                axis,
                op,
                argmax,
            } => {
                if !self.wants(*x) {
                    return;
                }
                let xv = self.value(*x);
                let (outer, n, inner) = kernels::axis_split(xv.shape(), *axis);
                let mut gx = vec![T::zero(); xv.numel()];
                let inv_n = T::one() / T::lit(n as f64);
                let yv = node.value.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        match op {
                            ReduceOp::Sum | ReduceOp::Mean => {
                                let v = if *op == ReduceOp::Mean { gi * inv_n } else { gi };
                                for j in 0..n {
                                    gx[(o * n + j) * inner + i] = v;
                                }
                            }
                            ReduceOp::Max => {
                                gx[(o * n + argmax[o * inner + i]) * inner + i] = gi;
                            }
                            ReduceOp::LogSumExp => {
                                let y = yv[o * inner + i];
                                for j in 0..n {
                                    let at = (o * n + j) * inner + i;
                                    gx[at] = gi * (xv.data()[at] - y).exp();
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads[x.0], vec![g[0]; n]);
                }
            }
            Op::Conv1d { x, w, geom } => {
                let (gx, gw) = kernels::conv1d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(gx) = gx {
                    accumulate(&mut grads[x.0], gx);
                }
                if let Some(gw) = gw {
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::Frames { x, win, hop } => {
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    for (f, row) in g.chunks(*win).enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            gx[f * hop + j] = gx[f * hop + j] + v;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::PowerSpectrum { x, n_fft, fft } => {
                if !self.wants(*x) {
                    return;
                }
                let xv = self.value(*x);
                let width = xv.shape()[1];
                let bins = n_fft / 2 + 1;
                let zero = Complex::new(T::zero(), T::zero());
                let mut spec = vec![zero; *n_fft];
                let mut gx = Vec::with_capacity(xv.numel());
                let two = T::lit(2.0);
                for (f, row) in xv.data().chunks(width.max(1)).take(xv.shape()[0]).enumerate() {
                    spectrum_of(row, &mut spec, fft.as_ref());
                    // dP_k/dx_n = 2 Re(conj(X_k) e^{-2πikn/N})
                    for (k, c) in spec.iter_mut().enumerate() {
                        *c = if k < bins {
                            c.conj() * g[f * bins + k]
                        } else {
                            zero
                        };
                    }
                    fft.process(&mut spec);
                    gx.extend(spec[..width].iter().map(|c| two * c.re));
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Interp { x, taps } => {
                if self.wants(*x) {
                    let f = self.shape(*x)[1];
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    for (c, grow) in g.chunks(taps.len()).enumerate() {
                        let row = &mut gx[c * f..(c + 1) * f];
                        for (t, &gv) in taps.iter().zip(grow) {
                            row[t.lo] = row[t.lo] + gv * (T::one() - t.frac);
                            row[t.hi] = row[t.hi] + gv * t.frac;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
    }
}

fn spectrum_of<T: Real>(row: &[T], buf: &mut [Complex<T>], fft: &dyn Fft<T>) {
    for (i, c) in buf.iter_mut().enumerate() {
        *c = Complex::new(row.get(i).copied().unwrap_or_else(T::zero), T::zero());
    }
    fft.process(buf);
}
