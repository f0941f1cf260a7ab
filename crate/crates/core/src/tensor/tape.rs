//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Node order is a
//! topological order, so the backward sweep walks the tape from the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{broadcast_shape, broadcast_strides, for_each_index, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose backward rule is supplied by the caller.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, given the inputs, the forward output
    /// and the upstream gradient. `None` means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Abs(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    IndexSelect { x: Var, indices: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(x) | Scale(x, _) | Sigmoid(x) | Tanh(x) | Silu(x) | Softplus(x) | Exp(x)
            | Abs(x) | Reshape(x) | SumAll(x) | MeanAll(x) => vec![*x],
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Concat { inputs, .. } | Custom { inputs, .. } => inputs.clone(),
            Narrow { x, .. }
            | Permute { x, .. }
            | MeanAxis { x, .. }
            | IndexSelect { x, .. }
            | Dropout { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    Recording,
    Frozen,
}

/// Gradient tape. Single-threaded by construction.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    mode: TapeMode,
    training: bool,
    rng: ChaCha8Rng,
    peak_bytes: usize,
    live_bytes: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// A tape whose dropout masks are drawn from a generator seeded with `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode: TapeMode::Recording,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            peak_bytes: 0,
            live_bytes: 0,
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// High-water mark of bytes held by node values and gradients.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// Drops every node and gradient and returns to recording mode.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.grads.clear();
        self.grads.shrink_to_fit();
        self.mode = TapeMode::Recording;
        self.live_bytes = 0;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.tracked || self.mode != TapeMode::Frozen {
            return None;
        }
        let data = match self.grads.get(v.0).and_then(|g| g.clone()) {
            Some(g) => g,
            None => vec![0.0; node.value.numel()],
        };
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
    }

    /// Tracked leaf (a trainable parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Untracked leaf (data, masks, fixed tensors).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.live_bytes += value.numel() * std::mem::size_of::<f64>();
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.mode == TapeMode::Frozen {
            return Err(Error::State("cannot record on a frozen tape".into()));
        }
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push_raw(value, op, tracked))
    }

    // ----- elementwise binary (broadcasting) -----

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let da = self.value(a).data();
            let db = self.value(b).data();
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(sa.to_vec(), data);
        }
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let st_a = broadcast_strides(sa, &out);
        let st_b = broadcast_strides(sb, &out);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut data = Vec::with_capacity(out.iter().product());
        for_each_index(&out, |_, idx| {
            let (mut oa, mut ob) = (0, 0);
            for (k, &i) in idx.iter().enumerate() {
                oa += i * st_a[k];
                ob += i * st_b[k];
            }
            data.push(f(da[oa], db[ob]));
        });
        Tensor::new(out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b))
    }

    // ----- elementwise unary -----

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| -a);
        self.push(v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x))
    }

    // ----- linear algebra -----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, 0.0);
        self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b))
    }

    /// Batched affine map `x W^T + b` over all leading axes of `x`.
    /// `x: [..., in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().unwrap_or(&0);
        if sx.is_empty() || sw.len() != 2 || sw[1] != fan_in {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let out_dim = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear bias", self.shape(b), &[out_dim]));
            }
        }
        let rows = self.value(x).numel() / fan_in.max(1);
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(out_dim) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            rows,
            fan_in,
            out_dim,
            self.value(x).data(),
            (fan_in, 1),
            self.value(w).data(),
            (1, fan_in),
            &mut out,
            beta,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b })
    }

    // ----- structural -----

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        self.push(v, Op::Narrow { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let n = self.shape(x).len();
        if a >= n || b >= n {
            return Err(Error::shape("transpose", self.shape(x), &[a, b]));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("mean_axis", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, r) in dst.iter_mut().zip(row) {
                    *d += r;
                }
            }
            for d in dst.iter_mut() {
                *d /= n as f64;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        self.push(Tensor::new(shape, data)?, Op::MeanAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.numel();
        if n == 0 {
            return Err(Error::shape("mean_all", t.shape(), &[]));
        }
        let s: f64 = t.data().iter().sum::<f64>() / n as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Gathers rows along axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("index_select", &s, indices));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::Index { index: i, len: s[0] });
            }
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        self.push(
            Tensor::new(shape, data)?,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    /// Inverted dropout. Identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Records a primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Sequential scan along axis 1 of `xs: [batch, time, ...]`.
    ///
    /// `step(tape, h, x_t)` returns the next carry; `x_t` has the time axis
    /// removed. Returns every carry stacked along axis 1 and the final carry.
    pub fn scan<F>(&mut self, init: Var, xs: Var, mut step: F) -> Result<(Var, Var)>
    where
        F: FnMut(&mut Tape, Var, Var) -> Result<Var>,
    {
        let s = self.shape(xs).to_vec();
        if s.len() < 2 || s[1] == 0 {
            return Err(Error::shape("scan", &s, &[]));
        }
        let mut step_shape = s.clone();
        step_shape.remove(1);
        let mut h = init;
        let mut carries = Vec::with_capacity(s[1]);
        for t in 0..s[1] {
            let xt = self.narrow(xs, 1, t, 1)?;
            let xt = self.reshape(xt, &step_shape)?;
            h = step(self, h, xt)?;
            let mut hs = self.shape(h).to_vec();
            hs.insert(1, 1);
            carries.push(self.reshape(h, &hs)?);
        }
        let stacked = self.concat(&carries, 1)?;
        Ok((stacked, h))
    }

    // ----- backward -----

    /// Accumulates d(loss)/d(leaf) on every tracked leaf and freezes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.mode == TapeMode::Frozen {
            return Err(Error::State("backward on a frozen tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.mode = TapeMode::Frozen;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g);
            self.live_bytes += g.len() * std::mem::size_of::<f64>();
            self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Sums `g` (shaped like `out`) back onto the shape of `v`.
    fn reduce_broadcast(&self, v: Var, out: &[usize], g: &[f64], scale: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let sv = self.shape(v);
        let mut acc = vec![0.0; self.value(v).numel()];
        if sv == out {
            for (i, a) in acc.iter_mut().enumerate() {
                *a = g[i] * scale(i, i);
            }
            return acc;
        }
        let st = broadcast_strides(sv, out);
        for_each_index(out, |flat, idx| {
            let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
            acc[off] += g[flat] * scale(flat, off);
        });
        acc
    }

    /// For broadcasting binary ops: flat offsets of `other` for each output element.
    fn partner_value(&self, other: Var, out: &[usize], flat_out: usize) -> f64 {
        let so = self.shape(other);
        if so == out {
            return self.value(other).data()[flat_out];
        }
        let st = broadcast_strides(so, out);
        let ost = strides(out);
        let mut rem = flat_out;
        let mut off = 0;
        for (k, s) in ost.iter().enumerate() {
            let i = rem / s;
            rem %= s;
            off += i * st[k];
        }
        self.value(other).data()[off]
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = self.reduce_broadcast(*a, &out_shape, g, |_, _| 1.0);
                let gb = self.reduce_broadcast(*b, &out_shape, g, |_, _| 1.0);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_broadcast(*a, &out_shape, g, |_, _| 1.0);
                let gb = self.reduce_broadcast(*b, &out_shape, g, |_, _| -1.0);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Mul(a, b) => {
                let ga = self.reduce_broadcast(*a, &out_shape, g, |flat, _| self.partner_value(*b, &out_shape, flat));
                let gb = self.reduce_broadcast(*b, &out_shape, g, |flat, _| self.partner_value(*a, &out_shape, flat));
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Div(a, b) => {
                let ga = self.reduce_broadcast(*a, &out_shape, g, |flat, _| {
                    1.0 / self.partner_value(*b, &out_shape, flat)
                });
                let out = self.nodes[i].value.data();
                let gb = self.reduce_broadcast(*b, &out_shape, g, |flat, _| {
                    -out[flat] / self.partner_value(*b, &out_shape, flat)
                });
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Neg(x) => self.accumulate(*x, g.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => self.accumulate(*x, g.iter().map(|v| v * c).collect()),
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let d = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(*x, d);
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data();
                let d = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(*x, d);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*x, d);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(g, &x)| g * sigmoid(x)).collect();
                self.accumulate(*x, d);
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data();
                let d = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.accumulate(*x, d);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(g, &x)| g * sign(x)).collect();
                self.accumulate(*x, d);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].tracked {
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), self.value(*b).data(), (1, n), &mut ga, 0.0);
                    self.accumulate(*a, ga);
                }
                if self.nodes[b.0].tracked {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), (1, k), g, (n, 1), &mut gb, 0.0);
                    self.accumulate(*b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let fan_in = *self.shape(*x).last().unwrap();
                let out_dim = self.shape(*w)[0];
                let rows = g.len() / out_dim.max(1);
                if self.nodes[x.0].tracked {
                    let mut gx = vec![0.0; rows * fan_in];
                    gemm(rows, out_dim, fan_in, g, (out_dim, 1), self.value(*w).data(), (fan_in, 1), &mut gx, 0.0);
                    self.accumulate(*x, gx);
                }
                if self.nodes[w.0].tracked {
                    let mut gw = vec![0.0; out_dim * fan_in];
                    gemm(out_dim, rows, fan_in, g, (1, out_dim), self.value(*x).data(), (fan_in, 1), &mut gw, 0.0);
                    self.accumulate(*w, gw);
                }
                if let Some(b) = b {
                    if self.nodes[b.0].tracked {
                        let mut gb = vec![0.0; out_dim];
                        for row in g.chunks_exact(out_dim) {
                            for (a, r) in gb.iter_mut().zip(row) {
                                *a += r;
                            }
                        }
                        self.accumulate(*b, gb);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut start = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    let mut gv = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        gv.extend_from_slice(&g[o * total + start..o * total + start + len]);
                    }
                    start += len;
                    self.accumulate(*v, gv);
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = self.shape(*x).to_vec();
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * sx[*axis] + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(*x, gx);
            }
            Op::Reshape(x) => self.accumulate(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(out_shape.clone(), g.to_vec())
                    .and_then(|t| t.permute(&inv))
                    .expect("permute backward");
                self.accumulate(*x, gt.into_data());
            }
            Op::MeanAxis { x, axis } => {
                let sx = self.shape(*x).to_vec();
                let outer: usize = sx[..*axis].iter().product();
                let n = sx[*axis];
                let inner: usize = sx[axis + 1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            gx[(o * n + j) * inner + k] = g[o * inner + k] / n as f64;
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0] / n as f64; n]);
            }
            Op::IndexSelect { x, indices } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (r, &src) in indices.iter().enumerate() {
                    for k in 0..inner {
                        gx[src * inner + k] += g[r * inner + k];
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Dropout { x, mask } => {
                let d = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(*x, d);
            }
            Op::Custom { inputs, op: custom } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = custom.backward(&vals, &self.nodes[i].value, g);
                for (v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        self.accumulate(*v, gv);
                    }
                }
            }
        }
        self.nodes[i].op = op;
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

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
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

/// `c = a * b + beta * c` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]` given as
/// (row stride, col stride) pairs; `c` is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a`, `b`, `c` for the given dims.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
