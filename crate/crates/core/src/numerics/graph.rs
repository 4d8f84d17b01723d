//! Reverse-mode autodiff over a linear tape.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products. The op
//! set is closed: only what the codec, its discriminators and the losses need.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// 1-D convolution hyperparameters (zero padding on both sides).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, p: ConvParams) -> Option<usize> {
    let span = p.dilation * (kernel - 1) + 1;
    let padded = len + 2 * p.padding;
    (padded >= span).then(|| (padded - span) / p.stride + 1)
}

pub(crate) fn conv_transpose_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    ((len - 1) * stride + kernel).checked_sub(2 * padding)
}

enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Square(NodeId),
    MaxConst(NodeId, T),
    LeakyRelu(NodeId, T),
    Gelu(NodeId),
    StopGradient,
    StraightThrough(NodeId),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: [usize; 3],
    },
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        p: ConvParams,
    },
    ConvTranspose1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    AvgPool1d {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    PeriodFold {
        x: NodeId,
        period: usize,
    },
    PadReflect {
        x: NodeId,
        left: usize,
    },
    StftPower {
        x: NodeId,
        n_fft: usize,
        hop: usize,
        spectra: Vec<Complex<T>>,
    },
}

struct Node<T: Real> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    detached: Vec<Vec<T>>,
    replay: Option<Vec<Vec<T>>>,
    branches: Vec<Vec<bool>>,
    branch_replay: Option<Vec<Vec<bool>>>,
    fft: FftPlanner<T>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// (outer, dim, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Reflect an index into `[0, len)` (numpy "reflect", repeated for short signals).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Periodic Hann window.
pub(crate) fn hann<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            T::lit(0.5 - 0.5 * x.cos())
        })
        .collect()
}

/// Range of output positions `t` with `0 <= t*stride + offset < len`.
fn valid_range(offset: isize, stride: usize, out_len: usize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if (len as isize) - offset <= 0 {
        0
    } else {
        ((len as isize - 1 - offset) / s + 1).max(0)
    };
    let lo = lo.max(0) as usize;
    let hi = (hi as usize).min(out_len);
    (lo, hi.max(lo))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            detached: Vec::new(),
            replay: None,
            branches: Vec::new(),
            branch_replay: None,
            fft: FftPlanner::new(),
        }
    }

    /// A graph whose `stop_gradient` nodes emit previously recorded values
    /// instead of their live input. Used by finite differences to hold
    /// detached branches frozen at the base point.
    pub fn with_frozen_detached(values: Vec<Vec<T>>) -> Self {
        let mut g = Self::new();
        g.replay = Some(values);
        g
    }

    /// Like [`Graph::with_frozen_detached`], and additionally every kinked op
    /// (`abs`, `max_const`, `leaky_relu`) stays on the piece recorded in
    /// `branches` instead of choosing one from its live input.
    pub fn with_frozen(values: Vec<Vec<T>>, branches: Vec<Vec<bool>>) -> Self {
        let mut g = Self::with_frozen_detached(values);
        g.branch_replay = Some(branches);
        g
    }

    /// Per-element piece chosen by every kinked op so far, in call order.
    pub fn branch_masks(&self) -> &[Vec<bool>] {
        &self.branches
    }

    /// Elementwise piecewise op: `upper` where `select(x)` holds (or the
    /// replayed mask says so), `lower` elsewhere.
    fn piecewise(
        &mut self,
        x: NodeId,
        select: impl Fn(T) -> bool,
        upper: impl Fn(T) -> T,
        lower: impl Fn(T) -> T,
        op: Op<T>,
    ) -> NodeId {
        let idx = self.branches.len();
        let mask: Vec<bool> = match self.branch_replay.as_ref().and_then(|f| f.get(idx)) {
            // replay runs the same function, so a missing or resized mask is a caller bug
            Some(m) => {
                assert_eq!(m.len(), self.value(x).len(), "frozen branch mask #{idx} has the wrong length");
                m.clone()
            }
            None => {
                assert!(self.branch_replay.is_none(), "frozen replay has no mask for kinked op #{idx}");
                self.value(x).iter().map(|&v| select(v)).collect()
            }
        };
        let value = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &up)| if up { upper(v) } else { lower(v) })
            .collect();
        self.branches.push(mask);
        let rg = self.rg(&[x]);
        self.push(value, self.shape(x).to_vec(), op, rg)
    }

    /// Values emitted by every `stop_gradient` call so far, in call order.
    pub fn detached_values(&self) -> &[Vec<T>] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, requires_grad)
    }

    /// Differentiable input.
    pub fn input(&mut self, t: &Tensor<T>) -> NodeId {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> NodeId {
        self.leaf(t, false)
    }

    pub fn constant_vec(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<NodeId> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("constant", &shape, &[data.len()]));
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<NodeId> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, self.shape(a).to_vec(), op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(value, self.shape(x).to_vec(), op, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.piecewise(x, |v| v >= T::zero(), |v| v, |v| -v, Op::Abs(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `max(x, c)` elementwise; gradient passes where `x > c`.
    pub fn max_const(&mut self, x: NodeId, c: T) -> NodeId {
        self.piecewise(x, |v| v > c, |v| v, |_| c, Op::MaxConst(x, c))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        self.piecewise(x, |v| v > T::zero(), |v| v, |v| v * slope, Op::LeakyRelu(x, slope))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, gelu_fwd, Op::Gelu(x))
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        let idx = self.detached.len();
        let value = match &self.replay {
            Some(frozen) => {
                let v = frozen.get(idx).ok_or_else(|| {
                    Error::Input(format!("frozen replay has no value for stop_gradient #{idx}"))
                })?;
                if v.len() != self.value(x).len() {
                    return Err(Error::shape("frozen stop_gradient", &[self.value(x).len()], &[v.len()]));
                }
                v.clone()
            }
            None => self.value(x).to_vec(),
        };
        self.detached.push(value.clone());
        Ok(self.push(value, self.shape(x).to_vec(), Op::StopGradient, false))
    }

    /// Forward emits `value`, backward passes the gradient unchanged to `x`.
    ///
    /// The offset `value - x` counts as a detached branch: under frozen
    /// replay the output is `x + offset₀`, so finite differences see the
    /// identity the backward pass assumes.
    pub fn straight_through(&mut self, x: NodeId, value: Vec<T>) -> Result<NodeId> {
        if value.len() != self.value(x).len() {
            return Err(Error::shape("straight_through", self.shape(x), &[value.len()]));
        }
        let idx = self.detached.len();
        let value = match &self.replay {
            Some(frozen) => {
                let off = frozen.get(idx).ok_or_else(|| {
                    Error::Input(format!("frozen replay has no value for detached branch #{idx}"))
                })?;
                if off.len() != value.len() {
                    return Err(Error::shape("frozen straight_through", &[value.len()], &[off.len()]));
                }
                self.detached.push(off.clone());
                self.value(x).iter().zip(off).map(|(&a, &o)| a + o).collect()
            }
            None => {
                let off = value.iter().zip(self.value(x)).map(|(&v, &a)| v - a).collect();
                self.detached.push(off);
                value
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, self.shape(x).to_vec(), Op::StraightThrough(x), rg))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push(vec![s], vec![], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = T::from_usize(self.value(x).len().max(1)).unwrap();
        let s = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push(vec![s / n], vec![], Op::Mean(x), rg)
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        Ok(self.mean(d))
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", &shape, self.shape(x)));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.value(x).to_vec(), shape, Op::Reshape(x), rg))
    }

    /// Permute the axes of a 3-D tensor.
    pub fn permute(&mut self, x: NodeId, perm: [usize; 3]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("permute (rank 3)", &[0, 0, 0], &s));
        }
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(Error::Input(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape = vec![s[perm[0]], s[perm[1]], s[perm[2]]];
        let strides = [s[1] * s[2], s[2], 1];
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len());
        for a in 0..out_shape[0] {
            for b in 0..out_shape[1] {
                for c in 0..out_shape[2] {
                    let idx = a * strides[perm[0]] + b * strides[perm[1]] + c * strides[perm[2]];
                    out.push(src[idx]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, out_shape, Op::Permute { x, perm }, rg))
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Input(format!(
                "narrow axis {axis} [{start}, {}) out of range for shape {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(out, out_shape, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let ref_shape = self.shape(*first).to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::Input(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &ref_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&ref_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let d = self.shape(id)[axis];
                let v = self.value(id);
                out.extend_from_slice(&v[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = ref_shape;
        out_shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            out_shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ── dense ───────────────────────────────────────────────────────

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), rg))
    }

    /// `y = x W^T + b` over the last axis; `W: [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[1] != d_in || sx.is_empty() {
            return Err(Error::shape("linear weight", &[sw.first().copied().unwrap_or(0), d_in], &sw));
        }
        let d_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("linear bias", &[d_out], self.shape(b)));
            }
        }
        let rows = self.value(x).len() / d_in.max(1);
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); rows * d_out];
        for r in 0..rows {
            let xr = &xv[r * d_in..(r + 1) * d_in];
            for o in 0..d_out {
                let wr = &wv[o * d_in..(o + 1) * d_in];
                let mut acc = T::zero();
                for (a, b) in xr.iter().zip(wr) {
                    acc += *a * *b;
                }
                out[r * d_out + o] = acc;
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                for o in 0..d_out {
                    out[r * d_out + o] += bv[o];
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(out, shape, Op::Linear { x, w, b }, rg))
    }

    /// Grouped 1-D convolution. `x: [B, Cin, L]`, `w: [Cout, Cin/groups, K]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, p: ConvParams) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 {
            return Err(Error::shape("conv1d (rank 3 input and weight)", &[0, 0, 0], &sx));
        }
        let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, cin_g, k) = (sw[0], sw[1], sw[2]);
        if p.stride == 0 || p.dilation == 0 || p.groups == 0 || k == 0 {
            return Err(Error::Config("conv1d stride, dilation, groups and kernel must be >= 1".into()));
        }
        if cin % p.groups != 0 || cout % p.groups != 0 || cin / p.groups != cin_g {
            return Err(Error::shape("conv1d weight", &[cout, cin / p.groups.max(1), k], &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv1d bias", &[cout], self.shape(b)));
            }
        }
        let lout = conv_out_len(len, k, p).ok_or_else(|| {
            Error::shape("conv1d input length (shorter than receptive field)", &[k], &sx)
        })?;
        let cout_g = cout / p.groups;
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let mut out = vec![T::zero(); bsz * cout * lout];
        for bi in 0..bsz {
            for co in 0..cout {
                let g = co / cout_g;
                let row = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                if let Some(bv) = bv {
                    row.iter_mut().for_each(|v| *v = bv[co]);
                }
                for cil in 0..cin_g {
                    let ci = g * cin_g + cil;
                    let xr = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                    for kk in 0..k {
                        let wk = wv[(co * cin_g + cil) * k + kk];
                        let off = (kk * p.dilation) as isize - p.padding as isize;
                        let (lo, hi) = valid_range(off, p.stride, lout, len);
                        if p.stride == 1 {
                            let start = (lo as isize + off) as usize;
                            for (o, &xv) in row[lo..hi].iter_mut().zip(&xr[start..start + (hi - lo)]) {
                                *o += wk * xv;
                            }
                        } else {
                            for t in lo..hi {
                                row[t] += wk * xr[(t as isize * p.stride as isize + off) as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(out, vec![bsz, cout, lout], Op::Conv1d { x, w, b, p }, rg))
    }

    /// Transposed 1-D convolution. `x: [B, Cin, L]`, `w: [Cin, Cout, K]`.
    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sx[1] {
            return Err(Error::shape("conv_transpose1d weight", &[sx.get(1).copied().unwrap_or(0), 0, 0], &sw));
        }
        if stride == 0 || sw[2] == 0 || sx[2] == 0 {
            return Err(Error::Config("conv_transpose1d stride, kernel and length must be >= 1".into()));
        }
        let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[1], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv_transpose1d bias", &[cout], self.shape(b)));
            }
        }
        let lout = conv_transpose_out_len(len, k, stride, padding)
            .filter(|&l| l > 0)
            .ok_or_else(|| Error::shape("conv_transpose1d padding exceeds output", &[k], &sx))?;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); bsz * cout * lout];
        if let Some(b) = b {
            let bv = self.value(b);
            for bi in 0..bsz {
                for co in 0..cout {
                    out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout]
                        .iter_mut()
                        .for_each(|v| *v = bv[co]);
                }
            }
        }
        for bi in 0..bsz {
            for ci in 0..cin {
                let xr = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                for co in 0..cout {
                    let row = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                    for kk in 0..k {
                        let wk = wv[(ci * cout + co) * k + kk];
                        // output index = i*stride + kk - padding
                        for (i, &xi) in xr.iter().enumerate() {
                            let t = (i * stride + kk) as isize - padding as isize;
                            if t >= 0 && (t as usize) < lout {
                                row[t as usize] += wk * xi;
                            }
                        }
                    }
                }
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(
            out,
            vec![bsz, cout, lout],
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Layer normalization over `axis` with per-feature affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, axis: usize, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!("layer_norm axis {axis} out of range for {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::shape("layer_norm affine", &[dim], self.shape(gamma)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let eps = T::lit(eps);
        let nd = T::from_usize(dim).unwrap();
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(outer * inner);
        let mut rstds = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| o * dim * inner + d * inner + i;
                let mut mean = T::zero();
                for d in 0..dim {
                    mean += xv[at(d)];
                }
                mean = mean / nd;
                let mut var = T::zero();
                for d in 0..dim {
                    let c = xv[at(d)] - mean;
                    var += c * c;
                }
                var = var / nd;
                let rstd = T::one() / (var + eps).sqrt();
                for d in 0..dim {
                    out[at(d)] = (xv[at(d)] - mean) * rstd * gv[d] + bv[d];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Average pooling over the last axis of `[B, C, L]`, no padding.
    pub fn avg_pool1d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || kernel == 0 || stride == 0 || s[2] < kernel {
            return Err(Error::shape("avg_pool1d", &[0, 0, kernel], &s));
        }
        let (rows, len) = (s[0] * s[1], s[2]);
        let lout = (len - kernel) / stride + 1;
        let inv = T::one() / T::from_usize(kernel).unwrap();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            let xr = &xv[r * len..(r + 1) * len];
            for t in 0..lout {
                let acc = xr[t * stride..t * stride + kernel].iter().fold(T::zero(), |a, &v| a + v);
                out.push(acc * inv);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![s[0], s[1], lout], Op::AvgPool1d { x, kernel, stride }, rg))
    }

    /// `[B, C, L]` with `L % period == 0` to `[B*period, C, L/period]`, column
    /// `j` of the period-strided view becoming batch row `b*period + j`.
    pub fn period_fold(&mut self, x: NodeId, period: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || period == 0 || s[2] % period != 0 {
            return Err(Error::shape("period_fold (length divisible by period)", &[0, 0, period], &s));
        }
        let (bsz, c, len) = (s[0], s[1], s[2]);
        let rows = len / period;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bsz {
            for j in 0..period {
                for ch in 0..c {
                    for i in 0..rows {
                        out[((b * period + j) * c + ch) * rows + i] = xv[(b * c + ch) * len + i * period + j];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![bsz * period, c, rows], Op::PeriodFold { x, period }, rg))
    }

    /// Reflect-pad the last axis.
    pub fn pad_reflect(&mut self, x: NodeId, left: usize, right: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let len = *s.last().ok_or_else(|| Error::Input("pad_reflect on scalar".into()))?;
        if len == 0 {
            return Err(Error::Input("pad_reflect on empty axis".into()));
        }
        let rows = self.value(x).len() / len;
        let lout = len + left + right;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            let xr = &xv[r * len..(r + 1) * len];
            for t in 0..lout {
                out.push(xr[reflect_index(t as isize - left as isize, len)]);
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = lout;
        let rg = self.rg(&[x]);
        Ok(self.push(out, shape, Op::PadReflect { x, left }, rg))
    }

    /// Power spectrogram `|STFT|^2` of `x: [B, L]`, Hann window of `n_fft`,
    /// centered frames with reflect padding. Output `[B, ceil(L/hop), n_fft/2+1]`.
    pub fn stft_power(&mut self, x: NodeId, n_fft: usize, hop: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("stft input [batch, samples]", &[0, 0], &s));
        }
        if n_fft == 0 || hop == 0 {
            return Err(Error::Config("stft window and hop must be >= 1".into()));
        }
        let (bsz, len) = (s[0], s[1]);
        if len == 0 {
            return Err(Error::Input("stft of empty signal".into()));
        }
        let frames = len.div_ceil(hop);
        let bins = n_fft / 2 + 1;
        let window: Vec<T> = hann(n_fft);
        let fft = self.fft.plan_fft_forward(n_fft);
        let xv = self.value(x).to_vec();
        let mut spectra = Vec::with_capacity(bsz * frames * bins);
        let mut out = Vec::with_capacity(bsz * frames * bins);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        let half = (n_fft / 2) as isize;
        for b in 0..bsz {
            let xr = &xv[b * len..(b + 1) * len];
            for f in 0..frames {
                let start = (f * hop) as isize - half;
                for (n, slot) in buf.iter_mut().enumerate() {
                    let v = xr[reflect_index(start + n as isize, len)] * window[n];
                    *slot = Complex::new(v, T::zero());
                }
                fft.process(&mut buf);
                for c in &buf[..bins] {
                    spectra.push(*c);
                    out.push(c.re * c.re + c.im * c.im);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            vec![bsz, frames, bins],
            Op::StftPower {
                x,
                n_fft,
                hop,
                spectra,
            },
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Backpropagate from a scalar node, filling gradient slots of every node
    /// that requires one.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward (scalar loss)", &[], self.shape(loss)));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &gy);
            }
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId) -> Option<&mut Vec<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.len();
        Some(self.grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_elementwise(&mut self, id: NodeId, gy: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(g) = self.acc(id) {
            for (i, (gi, &gyi)) in g.iter_mut().zip(gy).enumerate() {
                *gi += f(i, gyi);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, gy: &[T]) {
        // The op is temporarily moved out so that input values can be read
        // while gradient buffers are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.acc_elementwise(*a, gy, |_, g| g);
                self.acc_elementwise(*b, gy, |_, g| g);
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(*a, gy, |_, g| g);
                self.acc_elementwise(*b, gy, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.clone();
                let av = self.nodes[a.0].value.clone();
                self.acc_elementwise(*a, gy, |k, g| g * bv[k]);
                self.acc_elementwise(*b, gy, |k, g| g * av[k]);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc_elementwise(*x, gy, |_, g| g * c);
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                self.acc_elementwise(*x, gy, |_, g| g);
            }
            Op::Sum(x) => {
                let g0 = gy[0];
                self.acc_elementwise(*x, &vec![g0; self.nodes[x.0].value.len()], |_, g| g);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let g0 = gy[0] / T::from_usize(n.max(1)).unwrap();
                self.acc_elementwise(*x, &vec![g0; n], |_, g| g);
            }
            Op::Exp(x) => {
                let yv = self.nodes[i].value.clone();
                self.acc_elementwise(*x, gy, |k, g| g * yv[k]);
            }
            Op::Log(x) => {
                let xv = self.nodes[x.0].value.clone();
                self.acc_elementwise(*x, gy, |k, g| g / xv[k]);
            }
            Op::Sqrt(x) => {
                let yv = self.nodes[i].value.clone();
                let two = T::lit(2.0);
                self.acc_elementwise(*x, gy, |k, g| g / (two * yv[k]));
            }
            Op::Tanh(x) => {
                let yv = self.nodes[i].value.clone();
                self.acc_elementwise(*x, gy, |k, g| g * (T::one() - yv[k] * yv[k]));
            }
            Op::Abs(x) => {
                let xv = self.nodes[x.0].value.clone();
                self.acc_elementwise(*x, gy, |k, g| {
                    if xv[k] > T::zero() {
                        g
                    } else if xv[k] < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.nodes[x.0].value.clone();
                let two = T::lit(2.0);
                self.acc_elementwise(*x, gy, |k, g| two * xv[k] * g);
            }
            Op::MaxConst(x, c) => {
                let xv = self.nodes[x.0].value.clone();
                let c = *c;
                self.acc_elementwise(*x, gy, |k, g| if xv[k] > c { g } else { T::zero() });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.nodes[x.0].value.clone();
                let s = *slope;
                self.acc_elementwise(*x, gy, |k, g| if xv[k] > T::zero() { g } else { g * s });
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.clone();
                self.acc_elementwise(*x, gy, |k, g| g * gelu_grad(xv[k]));
            }
            Op::Permute { x, perm } => {
                let s = self.nodes[x.0].shape.clone();
                let strides = [s[1] * s[2], s[2], 1];
                let os = [s[perm[0]], s[perm[1]], s[perm[2]]];
                if let Some(gx) = self.acc(*x) {
                    let mut o = 0;
                    for a in 0..os[0] {
                        for b in 0..os[1] {
                            for c in 0..os[2] {
                                gx[a * strides[perm[0]] + b * strides[perm[1]] + c * strides[perm[2]]] += gy[o];
                                o += 1;
                            }
                        }
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.nodes[x.0].shape.clone();
                let (outer, dim, inner) = split_axis(&s, *axis);
                let len = self.nodes[i].shape[*axis];
                let start = *start;
                if let Some(gx) = self.acc(*x) {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        for (dst, &g) in gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&gy[o * len * inner..(o + 1) * len * inner])
                        {
                            *dst += g;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].shape.clone();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &id in inputs {
                    let d = self.nodes[id.0].shape[*axis];
                    if let Some(gx) = self.acc(id) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (dst, &g) in gx[o * d * inner..(o + 1) * d * inner]
                                .iter_mut()
                                .zip(&gy[src..src + d * inner])
                            {
                                *dst += g;
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::MatMul(a, b) => self.back_matmul(*a, *b, gy),
            Op::Linear { x, w, b } => self.back_linear(*x, *w, *b, gy),
            Op::Conv1d { x, w, b, p } => self.back_conv1d(i, *x, *w, *b, *p, gy),
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.back_conv_transpose1d(i, *x, *w, *b, *stride, *padding, gy),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                mean,
                rstd,
            } => self.back_layer_norm(*x, *gamma, *beta, *axis, mean, rstd, gy),
            Op::AvgPool1d { x, kernel, stride } => {
                let s = self.nodes[x.0].shape.clone();
                let lout = self.nodes[i].shape[2];
                let (rows, len) = (s[0] * s[1], s[2]);
                let inv = T::one() / T::from_usize(*kernel).unwrap();
                let (kernel, stride) = (*kernel, *stride);
                if let Some(gx) = self.acc(*x) {
                    for r in 0..rows {
                        for t in 0..lout {
                            let g = gy[r * lout + t] * inv;
                            for v in &mut gx[r * len + t * stride..r * len + t * stride + kernel] {
                                *v += g;
                            }
                        }
                    }
                }
            }
            Op::PeriodFold { x, period } => {
                let s = self.nodes[x.0].shape.clone();
                let (bsz, c, len) = (s[0], s[1], s[2]);
                let period = *period;
                let rows = len / period;
                if let Some(gx) = self.acc(*x) {
                    for b in 0..bsz {
                        for j in 0..period {
                            for ch in 0..c {
                                for r in 0..rows {
                                    gx[(b * c + ch) * len + r * period + j] += gy[((b * period + j) * c + ch) * rows + r];
                                }
                            }
                        }
                    }
                }
            }
            Op::PadReflect { x, left } => {
                let len = *self.nodes[x.0].shape.last().unwrap();
                let lout = *self.nodes[i].shape.last().unwrap();
                let rows = gy.len() / lout;
                let left = *left as isize;
                if let Some(gx) = self.acc(*x) {
                    for r in 0..rows {
                        for t in 0..lout {
                            gx[r * len + reflect_index(t as isize - left, len)] += gy[r * lout + t];
                        }
                    }
                }
            }
            Op::StftPower {
                x,
                n_fft,
                hop,
                spectra,
            } => self.back_stft_power(i, *x, *n_fft, *hop, spectra, gy),
        }
        self.nodes[i].op = op;
    }

    fn back_matmul(&mut self, a: NodeId, b: NodeId, gy: &[T]) {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if self.nodes[a.0].requires_grad {
            let bv = self.nodes[b.0].value.clone();
            let ga = self.acc(a).unwrap();
            for r in 0..m {
                for p in 0..k {
                    let mut acc = T::zero();
                    for c in 0..n {
                        acc += gy[r * n + c] * bv[p * n + c];
                    }
                    ga[r * k + p] += acc;
                }
            }
        }
        if self.nodes[b.0].requires_grad {
            let av = self.nodes[a.0].value.clone();
            let gb = self.acc(b).unwrap();
            for r in 0..m {
                for p in 0..k {
                    let ar = av[r * k + p];
                    for c in 0..n {
                        gb[p * n + c] += ar * gy[r * n + c];
                    }
                }
            }
        }
    }

    fn back_linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, gy: &[T]) {
        let sw = self.nodes[w.0].shape.clone();
        let (d_out, d_in) = (sw[0], sw[1]);
        let rows = gy.len() / d_out;
        if self.nodes[x.0].requires_grad {
            let wv = self.nodes[w.0].value.clone();
            let gx = self.acc(x).unwrap();
            for r in 0..rows {
                for o in 0..d_out {
                    let g = gy[r * d_out + o];
                    for (dst, &wv) in gx[r * d_in..(r + 1) * d_in].iter_mut().zip(&wv[o * d_in..(o + 1) * d_in]) {
                        *dst += g * wv;
                    }
                }
            }
        }
        if self.nodes[w.0].requires_grad {
            let xv = self.nodes[x.0].value.clone();
            let gw = self.acc(w).unwrap();
            for r in 0..rows {
                for o in 0..d_out {
                    let g = gy[r * d_out + o];
                    for (dst, &xv) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(&xv[r * d_in..(r + 1) * d_in]) {
                        *dst += g * xv;
                    }
                }
            }
        }
        if let Some(b) = b {
            if let Some(gb) = self.acc(b) {
                for r in 0..rows {
                    for o in 0..d_out {
                        gb[o] += gy[r * d_out + o];
                    }
                }
            }
        }
    }

    fn back_conv1d(&mut self, i: usize, x: NodeId, w: NodeId, b: Option<NodeId>, p: ConvParams, gy: &[T]) {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, cin_g, k) = (sw[0], sw[1], sw[2]);
        let lout = self.nodes[i].shape[2];
        let cout_g = cout / p.groups;
        let s = p.stride;
        if self.nodes[x.0].requires_grad {
            let wv = self.nodes[w.0].value.clone();
            let gx = self.acc(x).unwrap();
            for bi in 0..bsz {
                for co in 0..cout {
                    let g = co / cout_g;
                    let gr = &gy[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                    for cil in 0..cin_g {
                        let ci = g * cin_g + cil;
                        let gxr = &mut gx[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                        for kk in 0..k {
                            let wk = wv[(co * cin_g + cil) * k + kk];
                            let off = (kk * p.dilation) as isize - p.padding as isize;
                            let (lo, hi) = valid_range(off, s, lout, len);
                            if s == 1 {
                                let start = (lo as isize + off) as usize;
                                for (dst, &g) in gxr[start..start + (hi - lo)].iter_mut().zip(&gr[lo..hi]) {
                                    *dst += wk * g;
                                }
                            } else {
                                for t in lo..hi {
                                    gxr[(t as isize * s as isize + off) as usize] += wk * gr[t];
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.nodes[w.0].requires_grad {
            let xv = self.nodes[x.0].value.clone();
            let gw = self.acc(w).unwrap();
            for bi in 0..bsz {
                for co in 0..cout {
                    let g = co / cout_g;
                    let gr = &gy[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                    for cil in 0..cin_g {
                        let ci = g * cin_g + cil;
                        let xr = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                        for kk in 0..k {
                            let off = (kk * p.dilation) as isize - p.padding as isize;
                            let (lo, hi) = valid_range(off, s, lout, len);
                            let mut acc = T::zero();
                            if s == 1 {
                                let start = (lo as isize + off) as usize;
                                for (&g, &xv) in gr[lo..hi].iter().zip(&xr[start..start + (hi - lo)]) {
                                    acc += g * xv;
                                }
                            } else {
                                for t in lo..hi {
                                    acc += gr[t] * xr[(t as isize * s as isize + off) as usize];
                                }
                            }
                            gw[(co * cin_g + cil) * k + kk] += acc;
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            if let Some(gb) = self.acc(b) {
                for bi in 0..bsz {
                    for co in 0..cout {
                        let gr = &gy[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                        gb[co] += gr.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_conv_transpose1d(
        &mut self,
        i: usize,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
        gy: &[T],
    ) {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[1], sw[2]);
        let lout = self.nodes[i].shape[2];
        let index = |i: usize, kk: usize| -> Option<usize> {
            let t = (i * stride + kk) as isize - padding as isize;
            (t >= 0 && (t as usize) < lout).then_some(t as usize)
        };
        if self.nodes[x.0].requires_grad {
            let wv = self.nodes[w.0].value.clone();
            let gx = self.acc(x).unwrap();
            for bi in 0..bsz {
                for ci in 0..cin {
                    let gxr = &mut gx[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                    for co in 0..cout {
                        let gr = &gy[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                        for kk in 0..k {
                            let wk = wv[(ci * cout + co) * k + kk];
                            for (ii, dst) in gxr.iter_mut().enumerate() {
                                if let Some(t) = index(ii, kk) {
                                    *dst += wk * gr[t];
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.nodes[w.0].requires_grad {
            let xv = self.nodes[x.0].value.clone();
            let gw = self.acc(w).unwrap();
            for bi in 0..bsz {
                for ci in 0..cin {
                    let xr = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                    for co in 0..cout {
                        let gr = &gy[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                        for kk in 0..k {
                            let mut acc = T::zero();
                            for (ii, &xi) in xr.iter().enumerate() {
                                if let Some(t) = index(ii, kk) {
                                    acc += xi * gr[t];
                                }
                            }
                            gw[(ci * cout + co) * k + kk] += acc;
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            if let Some(gb) = self.acc(b) {
                for bi in 0..bsz {
                    for co in 0..cout {
                        let gr = &gy[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                        gb[co] += gr.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: usize,
        mean: &[T],
        rstd: &[T],
        gy: &[T],
    ) {
        let shape = self.nodes[x.0].shape.clone();
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = self.nodes[x.0].value.clone();
        let gv = self.nodes[gamma.0].value.clone();
        let nd = T::from_usize(dim).unwrap();
        let mut gx_local = self.nodes[x.0].requires_grad.then(|| vec![T::zero(); xv.len()]);
        let mut g_gamma = vec![T::zero(); dim];
        let mut g_beta = vec![T::zero(); dim];
        for o in 0..outer {
            for ii in 0..inner {
                let pos = o * inner + ii;
                let at = |d: usize| o * dim * inner + d * inner + ii;
                let (mu, rs) = (mean[pos], rstd[pos]);
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for d in 0..dim {
                    let xhat = (xv[at(d)] - mu) * rs;
                    let g = gy[at(d)];
                    g_gamma[d] += g * xhat;
                    g_beta[d] += g;
                    let dxhat = g * gv[d];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if let Some(gx) = gx_local.as_mut() {
                    let m1 = sum_dxhat / nd;
                    let m2 = sum_dxhat_xhat / nd;
                    for d in 0..dim {
                        let xhat = (xv[at(d)] - mu) * rs;
                        let dxhat = gy[at(d)] * gv[d];
                        gx[at(d)] += rs * (dxhat - m1 - xhat * m2);
                    }
                }
            }
        }
        if let Some(local) = gx_local {
            let gx = self.acc(x).unwrap();
            for (d, s) in gx.iter_mut().zip(local) {
                *d += s;
            }
        }
        if let Some(g) = self.acc(gamma) {
            for (d, s) in g.iter_mut().zip(&g_gamma) {
                *d += *s;
            }
        }
        if let Some(g) = self.acc(beta) {
            for (d, s) in g.iter_mut().zip(&g_beta) {
                *d += *s;
            }
        }
    }

    fn back_stft_power(&mut self, i: usize, x: NodeId, n_fft: usize, hop: usize, spectra: &[Complex<T>], gy: &[T]) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let len = self.nodes[x.0].shape[1];
        let out_shape = self.nodes[i].shape.clone();
        let (bsz, frames, bins) = (out_shape[0], out_shape[1], out_shape[2]);
        let window: Vec<T> = hann(n_fft);
        let fft: Arc<dyn Fft<T>> = self.fft.plan_fft_forward(n_fft);
        let half = (n_fft / 2) as isize;
        let two = T::lit(2.0);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        let gx = self.acc(x).unwrap();
        // dP_k/du_n = 2 Re(conj(X_k) e^{-2πikn/N}), so the frame gradient is
        // 2 w_n Re(FFT(G ⊙ conj X))_n with the one-sided spectrum zero-extended.
        for b in 0..bsz {
            for f in 0..frames {
                let base = (b * frames + f) * bins;
                buf.iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
                for k in 0..bins {
                    buf[k] = spectra[base + k].conj() * gy[base + k];
                }
                fft.process(&mut buf);
                let start = (f * hop) as isize - half;
                for n in 0..n_fft {
                    let idx = reflect_index(start + n as isize, len);
                    gx[b * len + idx] += two * window[n] * buf[n].re;
                }
            }
        }
    }
}

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
