//! Recorded computation tape with reverse-mode gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{accumulate, matmul_acc, matmul_nt_acc, matmul_tn_acc, real, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AutodiffError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    NonScalarLoss {
        shape: Vec<usize>,
    },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Self::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AutodiffError {}

pub type AdResult<T> = Result<T, AutodiffError>;

enum Op<F: Real> {
    Input,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// y = m·x + c
    AffineScalar(usize, F, F),
    /// y = x · s where s is a one-element tape value
    ScaleVar(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Ln(usize),
    Clamp(usize, F, F),
    /// (…, C) × (C, D): all leading axes of the left operand are flattened.
    MatMul(usize, usize),
    /// rank-1 · rank-1 → [1]
    Dot(usize, usize),
    /// (T, V, V) × (T, V, C), per-frame matrix product
    Bmm(usize, usize),
    /// const (V, V) × (T, V, C)
    BmmConstLeft(Tensor<F>, usize),
    /// (T, V, V) ⊙ const (V, V) broadcast over frames
    MulBcastFrames(usize, Tensor<F>),
    /// softmax over the last axis
    Softmax(usize),
    /// mask entries are 0 or 1/(1−p)
    Dropout(usize, Vec<F>),
    ConcatLast(Vec<usize>),
    SliceLast(usize, usize, usize),
    /// removes the first axis at the given index
    SliceFirst(usize, usize),
    /// stacks equal-shape tensors along a new first axis
    StackFirst(Vec<usize>),
    /// (…, C) → (C)
    MeanExceptLast(usize),
    /// (A, B, C) → (A, C), mean over the middle axis
    MeanMid(usize),
    MeanAll(usize),
    /// (…, C) → (C) with saved flat argmax rows
    MaxExceptLast(usize, Vec<usize>),
    /// x (T, V, C) ⊛ w (K, C, D) + b, zero-padded along T
    TemporalConv {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    /// x (V, C) ⊛ w (K, C, D) + b, zero-padded along V
    JointConv {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    /// x (…, C) ⊙ s (C)
    ChannelMul(usize, usize),
    /// x (…, C) + s (C)
    ChannelAdd(usize, usize),
    /// y = (x + eps)^(−1/2)
    RsqrtEps(usize, F),
    Transpose2(usize),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Dynamically recorded operation graph. Confined to one execution context.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    rng: ChaCha8Rng,
    /// Train mode enables dropout sampling; eval mode makes dropout identity.
    pub train: bool,
}

impl<F: Real> Tape<F> {
    pub fn new(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            train,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn input(&mut self, value: Tensor<F>, needs_grad: bool) -> Var {
        self.push(value, Op::Input, needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.input(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> AdResult<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(shape, data), Op::Add(a.0, b.0), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(shape, data), Op::Sub(a.0, b.0), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(shape, data), Op::Mul(a.0, b.0), needs))
    }

    /// m·x + c, elementwise with scalar constants.
    pub fn affine(&mut self, a: Var, m: F, c: F) -> Var {
        let value = self.value(a).map(|x| m * x + c);
        let needs = self.needs(a.0);
        self.push(value, Op::AffineScalar(a.0, m, c), needs)
    }

    pub fn scale(&mut self, a: Var, m: F) -> Var {
        self.affine(a, m, F::zero())
    }

    /// Elementwise product with a one-element tape value.
    pub fn scale_var(&mut self, a: Var, s: Var) -> AdResult<Var> {
        if self.value(s).numel() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_var",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data()[0];
        let value = self.value(a).map(|x| x * sv);
        let needs = self.needs(a.0) || self.needs(s.0);
        Ok(self.push(value, Op::ScaleVar(a.0, s.0), needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        let needs = self.needs(a.0);
        self.push(value, Op::Relu(a.0), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let value = self.value(a).map(|x| one / (one + (-x).exp()));
        let needs = self.needs(a.0);
        self.push(value, Op::Sigmoid(a.0), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let needs = self.needs(a.0);
        self.push(value, Op::Tanh(a.0), needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        let needs = self.needs(a.0);
        self.push(value, Op::Ln(a.0), needs)
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let value = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        let needs = self.needs(a.0);
        self.push(value, Op::Clamp(a.0, lo, hi), needs)
    }

    /// Matrix product with all leading axes of `a` flattened into rows:
    /// (…, C) × (C, D) → (…, D).
    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (m, k) = self.value(a).as_matrix_dims();
        let bs = self.value(b).shape();
        if bs.len() != 2 || bs[0] != k {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let n = bs[1];
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            shape = vec![n];
        } else {
            *shape.last_mut().unwrap() = n;
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(shape, out), Op::MatMul(a.0, b.0), needs))
    }

    /// Inner product of two rank-1 tensors, returned as shape `[1]`.
    pub fn dot(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("dot", a, b)?;
        if self.value(a).shape().len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .fold(F::zero(), |acc, (&x, &y)| acc + x * y);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(vec![1], vec![s]), Op::Dot(a.0, b.0), needs))
    }

    /// Per-frame matrix product: (T, V, V) × (T, V, C) → (T, V, C).
    pub fn bmm(&mut self, s: Var, x: Var) -> AdResult<Var> {
        let ss = self.value(s).shape().to_vec();
        let xs = self.value(x).shape().to_vec();
        let ok = ss.len() == 3 && xs.len() == 3 && ss[0] == xs[0] && ss[1] == ss[2] && ss[2] == xs[1];
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "bmm",
                lhs: ss,
                rhs: xs,
            });
        }
        let (t, v, c) = (xs[0], xs[1], xs[2]);
        let mut out = vec![F::zero(); t * v * c];
        for ti in 0..t {
            matmul_acc(
                &mut out[ti * v * c..(ti + 1) * v * c],
                &self.value(s).data()[ti * v * v..(ti + 1) * v * v],
                &self.value(x).data()[ti * v * c..(ti + 1) * v * c],
                v,
                v,
                c,
            );
        }
        let needs = self.needs(s.0) || self.needs(x.0);
        Ok(self.push(Tensor::new(xs, out), Op::Bmm(s.0, x.0), needs))
    }

    /// Shared-matrix product: const (V, V) × (T, V, C) → (T, V, C).
    pub fn bmm_const_left(&mut self, s: Tensor<F>, x: Var) -> AdResult<Var> {
        let xs = self.value(x).shape().to_vec();
        let ok = s.shape().len() == 2 && xs.len() == 3 && s.shape()[0] == s.shape()[1] && s.shape()[1] == xs[1];
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "bmm_const_left",
                lhs: s.shape().to_vec(),
                rhs: xs,
            });
        }
        let (t, v, c) = (xs[0], xs[1], xs[2]);
        let mut out = vec![F::zero(); t * v * c];
        for ti in 0..t {
            matmul_acc(
                &mut out[ti * v * c..(ti + 1) * v * c],
                s.data(),
                &self.value(x).data()[ti * v * c..(ti + 1) * v * c],
                v,
                v,
                c,
            );
        }
        let needs = self.needs(x.0);
        Ok(self.push(Tensor::new(xs, out), Op::BmmConstLeft(s, x.0), needs))
    }

    /// (T, V, V) ⊙ const (V, V), the constant broadcast over frames.
    pub fn mul_bcast_frames(&mut self, m: Var, n: Tensor<F>) -> AdResult<Var> {
        let ms = self.value(m).shape().to_vec();
        let ok = ms.len() == 3 && n.shape() == &ms[1..];
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_bcast_frames",
                lhs: ms,
                rhs: n.shape().to_vec(),
            });
        }
        let per = n.numel();
        let data: Vec<F> = self
            .value(m)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * n.data()[i % per])
            .collect();
        let needs = self.needs(m.0);
        Ok(self.push(Tensor::new(ms, data), Op::MulBcastFrames(m.0, n), needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = self.value(a).as_matrix_dims();
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let x = &self.value(a).data()[r * cols..(r + 1) * cols];
            let mx = x.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut sum = F::zero();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x.iter()) {
                *o = (v - mx).exp();
                sum = sum + *o;
            }
            for o in out[r * cols..(r + 1) * cols].iter_mut() {
                *o = *o / sum;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0);
        self.push(Tensor::new(shape, out), Op::Softmax(a.0), needs)
    }

    /// Inverted dropout: in train mode zeroes entries with probability `p`
    /// and scales survivors by 1/(1−p); in eval mode this is the identity.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return self.affine(a, F::one(), F::zero());
        }
        let keep = real::<F>(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0);
        self.push(Tensor::new(shape, data), Op::Dropout(a.0, mask), needs)
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> AdResult<Var> {
        assert!(!parts.is_empty());
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).shape().len() - 1].to_vec();
        let rows: usize = lead.iter().product::<usize>().max(1);
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            cols.push(*s.last().unwrap());
        }
        let total: usize = cols.iter().sum();
        let mut data = vec![F::zero(); rows * total];
        let mut off = 0;
        for (&p, &c) in parts.iter().zip(cols.iter()) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p.0));
        Ok(self.push(
            Tensor::new(shape, data),
            Op::ConcatLast(parts.iter().map(|v| v.0).collect()),
            needs,
        ))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> AdResult<Var> {
        let s = self.value(a).shape().to_vec();
        let cols = *s.last().unwrap_or(&1);
        if start + len > cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_last",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let rows = self.value(a).numel() / cols;
        let mut data = vec![F::zero(); rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.value(a).data()[r * cols + start..r * cols + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::new(shape, data), Op::SliceLast(a.0, start, len), needs))
    }

    /// Removes the first axis at `idx`: (A, …) → (…).
    pub fn slice_first(&mut self, a: Var, idx: usize) -> AdResult<Var> {
        let s = self.value(a).shape().to_vec();
        if s.is_empty() || idx >= s[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_first",
                lhs: s,
                rhs: vec![idx],
            });
        }
        let per = self.value(a).numel() / s[0];
        let data = self.value(a).data()[idx * per..(idx + 1) * per].to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(
            Tensor::new(s[1..].to_vec(), data),
            Op::SliceFirst(a.0, idx),
            needs,
        ))
    }

    /// Stacks equal-shape tensors along a new first axis.
    pub fn stack_first(&mut self, parts: &[Var]) -> AdResult<Var> {
        assert!(!parts.is_empty());
        let inner = self.value(parts[0]).shape().to_vec();
        let per = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * per);
        for &p in parts {
            if self.value(p).shape() != &inner[..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "stack_first",
                    lhs: inner,
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let needs = parts.iter().any(|&p| self.needs(p.0));
        Ok(self.push(
            Tensor::new(shape, data),
            Op::StackFirst(parts.iter().map(|v| v.0).collect()),
            needs,
        ))
    }

    /// Mean over all leading axes: (…, C) → (C).
    pub fn mean_except_last(&mut self, a: Var) -> Var {
        let (rows, cols) = self.value(a).as_matrix_dims();
        let inv = real::<F>(1.0 / rows as f64);
        let mut out = vec![F::zero(); cols];
        for r in 0..rows {
            accumulate(&mut out, &self.value(a).data()[r * cols..(r + 1) * cols]);
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let needs = self.needs(a.0);
        self.push(Tensor::new(vec![cols], out), Op::MeanExceptLast(a.0), needs)
    }

    /// Mean over the middle axis of a rank-3 tensor: (A, B, C) → (A, C).
    pub fn mean_mid(&mut self, a: Var) -> AdResult<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean_mid",
                lhs: s,
                rhs: vec![],
            });
        }
        let (ax, bx, cx) = (s[0], s[1], s[2]);
        let inv = real::<F>(1.0 / bx as f64);
        let mut out = vec![F::zero(); ax * cx];
        for i in 0..ax {
            for j in 0..bx {
                let row = &self.value(a).data()[(i * bx + j) * cx..(i * bx + j + 1) * cx];
                accumulate(&mut out[i * cx..(i + 1) * cx], row);
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::new(vec![ax, cx], out), Op::MeanMid(a.0), needs))
    }

    /// Mean of all entries → scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let inv = real::<F>(1.0 / n as f64);
        let s = self.value(a).iter().fold(F::zero(), |acc, &x| acc + x) * inv;
        let needs = self.needs(a.0);
        self.push(Tensor::scalar(s), Op::MeanAll(a.0), needs)
    }

    /// Max over all leading axes: (…, C) → (C).
    pub fn max_except_last(&mut self, a: Var) -> Var {
        let (rows, cols) = self.value(a).as_matrix_dims();
        let mut out = vec![F::neg_infinity(); cols];
        let mut arg = vec![0usize; cols];
        for r in 0..rows {
            let row = &self.value(a).data()[r * cols..(r + 1) * cols];
            for (c, &v) in row.iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r;
                }
            }
        }
        let needs = self.needs(a.0);
        self.push(Tensor::new(vec![cols], out), Op::MaxExceptLast(a.0, arg), needs)
    }

    fn conv_forward(
        x: &Tensor<F>,
        w: &Tensor<F>,
        b: Option<&Tensor<F>>,
        rows: usize,
        lanes: usize,
    ) -> Vec<F> {
        // x viewed as (rows, lanes, C); convolution along the rows axis with
        // zero padding, identical weights for every lane.
        let ws = w.shape();
        let (k, c, d) = (ws[0], ws[1], ws[2]);
        let half = (k - 1) / 2;
        let mut out = vec![F::zero(); rows * lanes * d];
        for ki in 0..k {
            let wk = &w.data()[ki * c * d..(ki + 1) * c * d];
            // out[r] += x[r + ki - half] · wk
            for r in 0..rows {
                let src = r as isize + ki as isize - half as isize;
                if src < 0 || src >= rows as isize {
                    continue;
                }
                let src = src as usize;
                matmul_acc(
                    &mut out[r * lanes * d..(r + 1) * lanes * d],
                    &x.data()[src * lanes * c..(src + 1) * lanes * c],
                    wk,
                    lanes,
                    c,
                    d,
                );
            }
        }
        if let Some(bias) = b {
            for chunk in out.chunks_mut(d) {
                accumulate(chunk, bias.data());
            }
        }
        out
    }

    fn conv_check(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        rank: usize,
    ) -> AdResult<(usize, usize, usize, usize, usize)> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let ok = xs.len() == rank
            && ws.len() == 3
            && ws[0] % 2 == 1
            && ws[1] == *xs.last().unwrap()
            && b.map_or(true, |bv| self.value(bv).shape() == [ws[2]]);
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: xs,
                rhs: ws,
            });
        }
        let rows = xs[0];
        let lanes = if rank == 3 { xs[1] } else { 1 };
        Ok((rows, lanes, ws[0], ws[1], ws[2]))
    }

    /// 1-D convolution along the time axis of (T, V, C) with weights
    /// (K, C, D) shared across joints; zero padding keeps T fixed.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> AdResult<Var> {
        let (t, v, _k, _c, d) = self.conv_check("temporal_conv", x, w, b, 3)?;
        let out = Self::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            t,
            v,
        );
        let needs =
            self.needs(x.0) || self.needs(w.0) || b.map_or(false, |bv| self.needs(bv.0));
        Ok(self.push(
            Tensor::new(vec![t, v, d], out),
            Op::TemporalConv {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
            needs,
        ))
    }

    /// 1-D convolution along the joint axis of (V, C) with weights (K, C, D);
    /// zero padding keeps V fixed.
    pub fn joint_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> AdResult<Var> {
        let (v, _lanes, _k, _c, d) = self.conv_check("joint_conv", x, w, b, 2)?;
        let out = Self::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            v,
            1,
        );
        let needs =
            self.needs(x.0) || self.needs(w.0) || b.map_or(false, |bv| self.needs(bv.0));
        Ok(self.push(
            Tensor::new(vec![v, d], out),
            Op::JointConv {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
            needs,
        ))
    }

    fn channel_check(&self, op: &'static str, x: Var, s: Var) -> AdResult<(usize, usize)> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if self.value(s).shape() != [cols] {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        Ok((rows, cols))
    }

    /// (…, C) ⊙ s(C), the vector broadcast over all leading axes.
    pub fn channel_mul(&mut self, x: Var, s: Var) -> AdResult<Var> {
        let (rows, cols) = self.channel_check("channel_mul", x, s)?;
        let sv = self.value(s).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for (d, &m) in data[r * cols..(r + 1) * cols].iter_mut().zip(sv.iter()) {
                *d = *d * m;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x.0) || self.needs(s.0);
        Ok(self.push(Tensor::new(shape, data), Op::ChannelMul(x.0, s.0), needs))
    }

    /// (…, C) + s(C), the vector broadcast over all leading axes.
    pub fn channel_add(&mut self, x: Var, s: Var) -> AdResult<Var> {
        let (rows, cols) = self.channel_check("channel_add", x, s)?;
        let sv = self.value(s).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            accumulate(&mut data[r * cols..(r + 1) * cols], &sv);
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x.0) || self.needs(s.0);
        Ok(self.push(Tensor::new(shape, data), Op::ChannelAdd(x.0, s.0), needs))
    }

    /// (x + eps)^(−1/2), elementwise.
    pub fn rsqrt_eps(&mut self, a: Var, eps: F) -> Var {
        let value = self.value(a).map(|x| (x + eps).sqrt().recip());
        let needs = self.needs(a.0);
        self.push(value, Op::RsqrtEps(a.0, eps), needs)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&mut self, a: Var) -> AdResult<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose2",
                lhs: s,
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::new(vec![c, r], data), Op::Transpose2(a.0), needs))
    }

    /// Reverse pass from a one-element loss. Returns one gradient slot per
    /// node; leaves recorded with `needs_grad = false` stay `None`.
    pub fn backward(&self, loss: Var) -> AdResult<Vec<Option<Tensor<F>>>> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![F::one()],
        ));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            // Leaves keep their gradient; interior nodes release theirs.
            if matches!(self.nodes[id].op, Op::Input) {
                grads[id] = Some(g);
            }
        }
        Ok(grads)
    }

    fn acc_grad(&self, grads: &mut [Option<Tensor<F>>], id: usize, delta: &[F]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape().to_vec()));
        accumulate(slot.data_mut(), delta);
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[id].op {
            Op::Input => {}
            Op::Add(a, b) => {
                self.acc_grad(grads, *a, g.data());
                self.acc_grad(grads, *b, g.data());
            }
            Op::Sub(a, b) => {
                self.acc_grad(grads, *a, g.data());
                let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                self.acc_grad(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.nodes[*b].value.iter())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                self.acc_grad(grads, *a, &da);
                let db: Vec<F> = g
                    .iter()
                    .zip(self.nodes[*a].value.iter())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.acc_grad(grads, *b, &db);
            }
            Op::AffineScalar(a, m, _) => {
                let da: Vec<F> = g.iter().map(|&gv| gv * *m).collect();
                self.acc_grad(grads, *a, &da);
            }
            Op::ScaleVar(a, s) => {
                let sv = self.nodes[*s].value.data()[0];
                let da: Vec<F> = g.iter().map(|&gv| gv * sv).collect();
                self.acc_grad(grads, *a, &da);
                let ds = g
                    .iter()
                    .zip(self.nodes[*a].value.iter())
                    .fold(F::zero(), |acc, (&gv, &av)| acc + gv * av);
                self.acc_grad(grads, *s, &[ds]);
            }
            Op::Relu(a) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.nodes[*a].value.iter())
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                self.acc_grad(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.nodes[id].value.iter())
                    .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                    .collect();
                self.acc_grad(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.nodes[id].value.iter())
                    .map(|(&gv, &yv)| gv * (F::one() - yv * yv))
                    .collect();
                self.acc_grad(grads, *a, &da);
            }
            Op::Ln(a) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.nodes[*a].value.iter())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                self.acc_grad(grads, *a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.nodes[*a].value.iter())
                    .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { F::zero() })
                    .collect();
                self.acc_grad(grads, *a, &da);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.as_matrix_dims();
                let n = self.nodes[*b].value.shape()[1];
                if self.nodes[*a].needs_grad {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt_acc(&mut da, g.data(), self.nodes[*b].value.data(), m, n, k);
                    self.acc_grad(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![F::zero(); k * n];
                    matmul_tn_acc(&mut db, self.nodes[*a].value.data(), g.data(), k, m, n);
                    self.acc_grad(grads, *b, &db);
                }
            }
            Op::Dot(a, b) => {
                let gv = g.data()[0];
                let da: Vec<F> = self.nodes[*b].value.iter().map(|&x| x * gv).collect();
                self.acc_grad(grads, *a, &da);
                let db: Vec<F> = self.nodes[*a].value.iter().map(|&x| x * gv).collect();
                self.acc_grad(grads, *b, &db);
            }
            Op::Bmm(s, x) => {
                let xs = self.nodes[*x].value.shape();
                let (t, v, c) = (xs[0], xs[1], xs[2]);
                if self.nodes[*s].needs_grad {
                    let mut ds = vec![F::zero(); t * v * v];
                    for ti in 0..t {
                        matmul_nt_acc(
                            &mut ds[ti * v * v..(ti + 1) * v * v],
                            &g.data()[ti * v * c..(ti + 1) * v * c],
                            &self.nodes[*x].value.data()[ti * v * c..(ti + 1) * v * c],
                            v,
                            c,
                            v,
                        );
                    }
                    self.acc_grad(grads, *s, &ds);
                }
                if self.nodes[*x].needs_grad {
                    let mut dx = vec![F::zero(); t * v * c];
                    for ti in 0..t {
                        matmul_tn_acc(
                            &mut dx[ti * v * c..(ti + 1) * v * c],
                            &self.nodes[*s].value.data()[ti * v * v..(ti + 1) * v * v],
                            &g.data()[ti * v * c..(ti + 1) * v * c],
                            v,
                            v,
                            c,
                        );
                    }
                    self.acc_grad(grads, *x, &dx);
                }
            }
            Op::BmmConstLeft(s, x) => {
                let xs = self.nodes[*x].value.shape();
                let (t, v, c) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![F::zero(); t * v * c];
                for ti in 0..t {
                    matmul_tn_acc(
                        &mut dx[ti * v * c..(ti + 1) * v * c],
                        s.data(),
                        &g.data()[ti * v * c..(ti + 1) * v * c],
                        v,
                        v,
                        c,
                    );
                }
                self.acc_grad(grads, *x, &dx);
            }
            Op::MulBcastFrames(m, n) => {
                let per = n.numel();
                let dm: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * n.data()[i % per])
                    .collect();
                self.acc_grad(grads, *m, &dm);
            }
            Op::Softmax(a) => {
                let (rows, cols) = self.nodes[id].value.as_matrix_dims();
                let y = self.nodes[id].value.data();
                let mut da = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot = yr
                        .iter()
                        .zip(gr.iter())
                        .fold(F::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for ((d, &yv), &gv) in da[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yr.iter())
                        .zip(gr.iter())
                    {
                        *d = yv * (gv - dot);
                    }
                }
                self.acc_grad(grads, *a, &da);
            }
            Op::Dropout(a, mask) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gv, &mv)| gv * mv)
                    .collect();
                self.acc_grad(grads, *a, &da);
            }
            Op::ConcatLast(parts) => {
                let total = *self.nodes[id].value.shape().last().unwrap();
                let rows = self.nodes[id].value.numel() / total;
                let mut off = 0;
                for &p in parts {
                    let c = *self.nodes[p].value.shape().last().unwrap();
                    if self.nodes[p].needs_grad {
                        let mut dp = vec![F::zero(); rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        self.acc_grad(grads, p, &dp);
                    }
                    off += c;
                }
            }
            Op::SliceLast(a, start, len) => {
                let cols = *self.nodes[*a].value.shape().last().unwrap();
                let rows = self.nodes[*a].value.numel() / cols;
                let mut da = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.acc_grad(grads, *a, &da);
            }
            Op::SliceFirst(a, idx) => {
                let per = g.numel();
                let mut da = vec![F::zero(); self.nodes[*a].value.numel()];
                da[idx * per..(idx + 1) * per].copy_from_slice(g.data());
                self.acc_grad(grads, *a, &da);
            }
            Op::StackFirst(parts) => {
                let per = self.nodes[parts[0]].value.numel();
                for (i, &p) in parts.iter().enumerate() {
                    self.acc_grad(grads, p, &g.data()[i * per..(i + 1) * per]);
                }
            }
            Op::MeanExceptLast(a) => {
                let (rows, cols) = self.nodes[*a].value.as_matrix_dims();
                let inv = real::<F>(1.0 / rows as f64);
                let mut da = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    for (d, &gv) in da[r * cols..(r + 1) * cols].iter_mut().zip(g.iter()) {
                        *d = gv * inv;
                    }
                }
                self.acc_grad(grads, *a, &da);
            }
            Op::MeanMid(a) => {
                let s = self.nodes[*a].value.shape();
                let (ax, bx, cx) = (s[0], s[1], s[2]);
                let inv = real::<F>(1.0 / bx as f64);
                let mut da = vec![F::zero(); ax * bx * cx];
                for i in 0..ax {
                    let gr = &g.data()[i * cx..(i + 1) * cx];
                    for j in 0..bx {
                        for (d, &gv) in da[(i * bx + j) * cx..(i * bx + j + 1) * cx]
                            .iter_mut()
                            .zip(gr.iter())
                        {
                            *d = gv * inv;
                        }
                    }
                }
                self.acc_grad(grads, *a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.numel();
                let gv = g.data()[0] * real::<F>(1.0 / n as f64);
                let da = vec![gv; n];
                self.acc_grad(grads, *a, &da);
            }
            Op::MaxExceptLast(a, arg) => {
                let (_rows, cols) = self.nodes[*a].value.as_matrix_dims();
                let mut da = vec![F::zero(); self.nodes[*a].value.numel()];
                for (c, (&r, &gv)) in arg.iter().zip(g.iter()).enumerate() {
                    da[r * cols + c] = gv;
                }
                self.acc_grad(grads, *a, &da);
            }
            Op::TemporalConv { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                self.conv_backward(g, *x, *w, *b, xs[0], xs[1], grads);
            }
            Op::JointConv { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                self.conv_backward(g, *x, *w, *b, xs[0], 1, grads);
            }
            Op::ChannelMul(x, s) => {
                let (rows, cols) = self.nodes[*x].value.as_matrix_dims();
                let sv = self.nodes[*s].value.data();
                if self.nodes[*x].needs_grad {
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        for ((d, &gv), &m) in dx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(g.data()[r * cols..(r + 1) * cols].iter())
                            .zip(sv.iter())
                        {
                            *d = gv * m;
                        }
                    }
                    self.acc_grad(grads, *x, &dx);
                }
                if self.nodes[*s].needs_grad {
                    let xv = self.nodes[*x].value.data();
                    let mut ds = vec![F::zero(); cols];
                    for r in 0..rows {
                        for (c, d) in ds.iter_mut().enumerate() {
                            *d = *d + g.data()[r * cols + c] * xv[r * cols + c];
                        }
                    }
                    self.acc_grad(grads, *s, &ds);
                }
            }
            Op::ChannelAdd(x, s) => {
                let (rows, cols) = self.nodes[*x].value.as_matrix_dims();
                self.acc_grad(grads, *x, g.data());
                if self.nodes[*s].needs_grad {
                    let mut ds = vec![F::zero(); cols];
                    for r in 0..rows {
                        accumulate(&mut ds, &g.data()[r * cols..(r + 1) * cols]);
                    }
                    self.acc_grad(grads, *s, &ds);
                }
            }
            Op::RsqrtEps(a, eps) => {
                let half = real::<F>(0.5);
                let da: Vec<F> = g
                    .iter()
                    .zip(self.nodes[*a].value.iter())
                    .map(|(&gv, &xv)| {
                        let t = (xv + *eps).sqrt().recip();
                        -half * t * t * t * gv
                    })
                    .collect();
                self.acc_grad(grads, *a, &da);
            }
            Op::Transpose2(a) => {
                let s = self.nodes[id].value.shape();
                let (r, c) = (s[0], s[1]);
                let mut da = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.acc_grad(grads, *a, &da);
            }
        }
    }

    fn conv_backward(
        &self,
        g: &Tensor<F>,
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        lanes: usize,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let ws = self.nodes[w].value.shape();
        let (k, c, d) = (ws[0], ws[1], ws[2]);
        let half = (k - 1) / 2;
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        if self.nodes[x].needs_grad {
            let mut dx = vec![F::zero(); rows * lanes * c];
            for ki in 0..k {
                let wk = &wv[ki * c * d..(ki + 1) * c * d];
                for r in 0..rows {
                    let src = r as isize + ki as isize - half as isize;
                    if src < 0 || src >= rows as isize {
                        continue;
                    }
                    let src = src as usize;
                    // dx[src] += g[r] · wkᵀ
                    matmul_nt_acc(
                        &mut dx[src * lanes * c..(src + 1) * lanes * c],
                        &g.data()[r * lanes * d..(r + 1) * lanes * d],
                        wk,
                        lanes,
                        d,
                        c,
                    );
                }
            }
            self.acc_grad(grads, x, &dx);
        }
        if self.nodes[w].needs_grad {
            let mut dw = vec![F::zero(); k * c * d];
            for ki in 0..k {
                let dwk = &mut dw[ki * c * d..(ki + 1) * c * d];
                for r in 0..rows {
                    let src = r as isize + ki as isize - half as isize;
                    if src < 0 || src >= rows as isize {
                        continue;
                    }
                    let src = src as usize;
                    // dw_k += x[src]ᵀ · g[r]
                    matmul_tn_acc(
                        dwk,
                        &xv[src * lanes * c..(src + 1) * lanes * c],
                        &g.data()[r * lanes * d..(r + 1) * lanes * d],
                        c,
                        lanes,
                        d,
                    );
                }
            }
            self.acc_grad(grads, w, &dw);
        }
        if let Some(bid) = b {
            if self.nodes[bid].needs_grad {
                let mut db = vec![F::zero(); d];
                for chunk in g.data().chunks(d) {
                    accumulate(&mut db, chunk);
                }
                self.acc_grad(grads, bid, &db);
            }
        }
    }
}

/// Human-readable shape list, used by error paths in higher layers.
pub fn shape_string(shape: &[usize]) -> String {
    format!("{shape:?}")
}
