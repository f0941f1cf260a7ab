//! Selective state-space preprocessing block.
//!
//! One block maps `B x L x D` to `B x L x D`:
//! in-projection to an `E = 2D` wide stream and gate, optional causal depthwise
//! convolution, SiLU, input-dependent `Δ`, `B`, `C`, the selective scan, SiLU
//! gating, out-projection and an outer additive skip.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::params::{uniform, Bound, ParamStore};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Shape of one selective scan problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub inner: usize,
    pub state: usize,
}

/// Inputs of [`ssm_scan`], all row-major:
/// `u, delta: [batch, len, inner]`, `a: [inner, state]`,
/// `b, c: [batch, len, state]`, `d_skip: [inner]`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d_skip: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanStrategy {
    #[default]
    Sequential,
    /// Prefix combination of `(Ā, B̄u)` pairs; same recurrence, different association.
    Associative,
}

impl ScanInputs<'_> {
    fn check(&self, dims: ScanDims) -> Result<()> {
        let ScanDims { batch, len, inner, state } = dims;
        let expect = [
            ("u", self.u.len(), batch * len * inner),
            ("delta", self.delta.len(), batch * len * inner),
            ("a", self.a.len(), inner * state),
            ("b", self.b.len(), batch * len * state),
            ("c", self.c.len(), batch * len * state),
            ("d_skip", self.d_skip.len(), inner),
        ];
        for (_, got, want) in expect {
            if got != want {
                return Err(Error::shape("ssm_scan", &[batch, len, inner, state], &[got]));
            }
        }
        if let Some(i) = self.delta.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::Numeric(format!("ssm_scan requires Δ > 0; Δ[{i}] = {}", self.delta[i])));
        }
        Ok(())
    }
}

/// Selective scan with simplified zero-order hold:
/// `h_t = exp(Δ_t A) ∘ h_{t-1} + Δ_t B_t u_t`, `y_t = <C_t, h_t> + D u_t`, `h_0 = 0`.
///
/// Returns `y: [batch, len, inner]` and every hidden state `[batch, len, inner, state]`.
pub fn ssm_scan(dims: ScanDims, inputs: ScanInputs<'_>, strategy: ScanStrategy) -> Result<(Vec<f64>, Vec<f64>)> {
    inputs.check(dims)?;
    let ScanDims { batch, len, inner, state } = dims;
    let ScanInputs { u, delta, a, b, c, d_skip } = inputs;
    let mut states = vec![0.0; batch * len * inner * state];
    let hidx = |bi: usize, t: usize, e: usize, n: usize| ((bi * len + t) * inner + e) * state + n;

    match strategy {
        ScanStrategy::Sequential => {
            for bi in 0..batch {
                for t in 0..len {
                    for e in 0..inner {
                        let x = (bi * len + t) * inner + e;
                        let (dt, ut) = (delta[x], u[x]);
                        for n in 0..state {
                            let prev = if t == 0 { 0.0 } else { states[hidx(bi, t - 1, e, n)] };
                            let decay = (dt * a[e * state + n]).exp();
                            states[hidx(bi, t, e, n)] = decay * prev + dt * b[(bi * len + t) * state + n] * ut;
                        }
                    }
                }
            }
        }
        ScanStrategy::Associative => {
            let mut pairs = vec![(0.0, 0.0); len];
            for bi in 0..batch {
                for e in 0..inner {
                    for n in 0..state {
                        for (t, p) in pairs.iter_mut().enumerate() {
                            let x = (bi * len + t) * inner + e;
                            *p = (
                                (delta[x] * a[e * state + n]).exp(),
                                delta[x] * b[(bi * len + t) * state + n] * u[x],
                            );
                        }
                        inclusive_linear_scan(&mut pairs);
                        for (t, p) in pairs.iter().enumerate() {
                            states[hidx(bi, t, e, n)] = p.1;
                        }
                    }
                }
            }
        }
    }

    let mut y = vec![0.0; batch * len * inner];
    for bi in 0..batch {
        for t in 0..len {
            let crow = &c[(bi * len + t) * state..(bi * len + t + 1) * state];
            for e in 0..inner {
                let x = (bi * len + t) * inner + e;
                let h = &states[hidx(bi, t, e, 0)..hidx(bi, t, e, 0) + state];
                let readout: f64 = crow.iter().zip(h).map(|(c, h)| c * h).sum();
                y[x] = readout + d_skip[e] * u[x];
            }
        }
    }
    Ok((y, states))
}

/// In-place inclusive scan of affine maps `h -> a h + b` starting from `h = 0`
/// (Hillis–Steele doubling). On return, `pairs[t].1` holds `h_t`.
pub fn inclusive_linear_scan(pairs: &mut [(f64, f64)]) {
    let n = pairs.len();
    let mut offset = 1;
    let mut prev = pairs.to_vec();
    while offset < n {
        prev.copy_from_slice(pairs);
        for t in offset..n {
            let (a1, b1) = prev[t - offset];
            let (a2, b2) = prev[t];
            pairs[t] = (a1 * a2, a2 * b1 + b2);
        }
        offset *= 2;
    }
}

#[derive(Debug)]
struct SelectiveScanOp {
    dims: ScanDims,
    states: Vec<f64>,
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let ScanDims { batch, len, inner, state } = self.dims;
        let [u, delta, a, b, c, d_skip] = inputs else {
            unreachable!("selective scan has six inputs")
        };
        let (u, delta, a, b, c, d_skip) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d_skip.data());
        let h = &self.states;
        let hidx = |bi: usize, t: usize, e: usize, n: usize| ((bi * len + t) * inner + e) * state + n;

        let mut gu = vec![0.0; u.len()];
        let mut gdelta = vec![0.0; delta.len()];
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        let mut gc = vec![0.0; c.len()];
        let mut gd = vec![0.0; d_skip.len()];
        // carried d(loss)/d(h_{t}) from step t+1, per (e, n)
        let mut carry = vec![0.0; inner * state];

        for bi in 0..batch {
            carry.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..len).rev() {
                let row = bi * len + t;
                for e in 0..inner {
                    let x = row * inner + e;
                    let (dt, ut, g) = (delta[x], u[x], gy[x]);
                    gd[e] += g * ut;
                    gu[x] += g * d_skip[e];
                    for n in 0..state {
                        let hv = h[hidx(bi, t, e, n)];
                        gc[row * state + n] += g * hv;
                        let dh = g * c[row * state + n] + carry[e * state + n];
                        let an = a[e * state + n];
                        let decay = (dt * an).exp();
                        let prev = if t == 0 { 0.0 } else { h[hidx(bi, t - 1, e, n)] };
                        let bn = b[row * state + n];
                        // through decay = exp(Δ a)
                        let gdecay = dh * prev * decay;
                        gdelta[x] += gdecay * an + dh * bn * ut;
                        ga[e * state + n] += gdecay * dt;
                        gb[row * state + n] += dh * dt * ut;
                        gu[x] += dh * dt * bn;
                        carry[e * state + n] = dh * decay;
                    }
                }
            }
        }
        vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gd)]
    }
}

/// Records the selective scan on the tape.
///
/// Shapes: `u, delta: [B, L, E]`, `a: [E, N]`, `b, c: [B, L, N]`, `d_skip: [E]`.
pub fn selective_scan(tape: &mut Tape, u: Var, delta: Var, a: Var, b: Var, c: Var, d_skip: Var) -> Result<Var> {
    let su = tape.shape(u).to_vec();
    let sa = tape.shape(a).to_vec();
    if su.len() != 3 || sa.len() != 2 || sa[0] != su[2] {
        return Err(Error::shape("selective_scan", &su, &sa));
    }
    for (v, want) in [
        (delta, vec![su[0], su[1], su[2]]),
        (b, vec![su[0], su[1], sa[1]]),
        (c, vec![su[0], su[1], sa[1]]),
        (d_skip, vec![su[2]]),
    ] {
        if tape.shape(v) != want.as_slice() {
            return Err(Error::shape("selective_scan", tape.shape(v), &want));
        }
    }
    let dims = ScanDims {
        batch: su[0],
        len: su[1],
        inner: su[2],
        state: sa[1],
    };
    let (y, states) = ssm_scan(
        dims,
        ScanInputs {
            u: tape.value(u).data(),
            delta: tape.value(delta).data(),
            a: tape.value(a).data(),
            b: tape.value(b).data(),
            c: tape.value(c).data(),
            d_skip: tape.value(d_skip).data(),
        },
        ScanStrategy::Sequential,
    )?;
    let out = Tensor::new(su, y)?;
    tape.custom(&[u, delta, a, b, c, d_skip], out, Box::new(SelectiveScanOp { dims, states }))
}

#[derive(Debug)]
struct CausalConvOp {
    batch: usize,
    len: usize,
    channels: usize,
    kernel: usize,
}

impl CustomOp for CausalConvOp {
    fn name(&self) -> &'static str {
        "causal_depthwise_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let Self { batch, len, channels, kernel } = *self;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; channels];
        for bi in 0..batch {
            for t in 0..len {
                for e in 0..channels {
                    let go = g[(bi * len + t) * channels + e];
                    gb[e] += go;
                    for j in 0..kernel {
                        if let Some(src) = (t + j).checked_sub(kernel - 1) {
                            let xi = (bi * len + src) * channels + e;
                            gw[e * kernel + j] += go * x[xi];
                            gx[xi] += go * w[e * kernel + j];
                        }
                    }
                }
            }
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }
}

/// Causal depthwise convolution over time, zero left padding.
/// `x: [B, L, E]`, `w: [E, k]`, `b: [E]`; `y[t] = b + Σ_j w[j] x[t + j - (k - 1)]`.
pub fn causal_conv(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let sw = tape.shape(w).to_vec();
    if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] || tape.shape(b) != [sx[2]] {
        return Err(Error::shape("causal_conv", &sx, &sw));
    }
    let (batch, len, channels, kernel) = (sx[0], sx[1], sx[2], sw[1]);
    let (xd, wd, bd) = (tape.value(x).data(), tape.value(w).data(), tape.value(b).data());
    let mut y = vec![0.0; xd.len()];
    for bi in 0..batch {
        for t in 0..len {
            for e in 0..channels {
                let mut acc = bd[e];
                for j in 0..kernel {
                    if let Some(src) = (t + j).checked_sub(kernel - 1) {
                        acc += wd[e * kernel + j] * xd[(bi * len + src) * channels + e];
                    }
                }
                y[(bi * len + t) * channels + e] = acc;
            }
        }
    }
    let out = Tensor::new(sx, y)?;
    tape.custom(
        &[x, w, b],
        out,
        Box::new(CausalConvOp {
            batch,
            len,
            channels,
            kernel,
        }),
    )
}

/// Shape of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmBlockSpec {
    pub d_model: usize,
    pub d_state: usize,
    pub use_conv: bool,
    pub conv_kernel: usize,
}

impl SsmBlockSpec {
    pub fn d_inner(&self) -> usize {
        2 * self.d_model
    }

    /// Registers freshly initialized block parameters under `prefix`.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
        let (d, e, n) = (self.d_model, self.d_inner(), self.d_state);
        let name = |s: &str| format!("{prefix}.{s}");
        store.insert(name("in_proj"), uniform(rng, &[2 * e, d], 1.0 / (d as f64).sqrt()));
        if self.use_conv {
            let k = self.conv_kernel;
            store.insert(name("conv.w"), uniform(rng, &[e, k], 1.0 / (k as f64).sqrt()));
            store.insert(name("conv.b"), uniform(rng, &[e], 1.0 / (k as f64).sqrt()));
        }
        store.insert(name("dt.w"), uniform(rng, &[e, e], 1.0 / (e as f64).sqrt()));
        // softplus(dt.b) log-uniform in [1e-3, 1e-1]
        let dt_bias = Tensor::from_fn([e], |_| {
            let log_dt = rng.random_range((1e-3f64).ln()..(1e-1f64).ln());
            let dt = log_dt.exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        store.insert(name("dt.b"), dt_bias);
        store.insert(name("b_proj"), uniform(rng, &[n, e], 1.0 / (e as f64).sqrt()));
        store.insert(name("c_proj"), uniform(rng, &[n, e], 1.0 / (e as f64).sqrt()));
        store.insert(name("a_log"), Tensor::from_fn([e, n], |i| ((i % n + 1) as f64).ln()));
        store.insert(name("d"), Tensor::full([e], 1.0));
        store.insert(name("out_proj"), uniform(rng, &[d, e], 1.0 / (e as f64).sqrt()));
    }

    /// `x: [B, L, D] -> [B, L, D]`, including the outer skip.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_model {
            return Err(Error::shape("mamba_forward", &s, &[self.d_model]));
        }
        let e = self.d_inner();
        let p = |n: &str| params.get(&format!("{prefix}.{n}"));
        let proj = tape.linear(x, p("in_proj")?, None)?;
        let mut stream = tape.narrow(proj, 2, 0, e)?;
        let gate = tape.narrow(proj, 2, e, e)?;
        if self.use_conv {
            stream = causal_conv(tape, stream, p("conv.w")?, p("conv.b")?)?;
        }
        let u = tape.silu(stream)?;
        let dt_pre = tape.linear(u, p("dt.w")?, Some(p("dt.b")?))?;
        let delta = tape.softplus(dt_pre)?;
        let b = tape.linear(u, p("b_proj")?, None)?;
        let c = tape.linear(u, p("c_proj")?, None)?;
        let a_pos = tape.exp(p("a_log")?)?;
        let a = tape.neg(a_pos)?;
        let y = selective_scan(tape, u, delta, a, b, c, p("d")?)?;
        let gate = tape.silu(gate)?;
        let gated = tape.mul(y, gate)?;
        let out = tape.linear(gated, p("out_proj")?, None)?;
        tape.add(x, out)
    }
}
