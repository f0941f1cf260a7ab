//! The forecaster: instance normalization, optional selective-SSM
//! preprocessing, implicit (or explicit) segmentation, GRU encoding with a
//! residual bypass, and parallel multi-step decoding.

mod config;
mod norm;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{MambaWidth, ModelConfig, NormKind, Variant};
pub use norm::{instance_norm, Anchor};
pub use params::{Bound, ParamStore};

use crate::error::{Error, Result};
use crate::mamba::SsmBlockSpec;
use crate::tensor::{Tape, Tensor, Var};
use params::{normal, uniform};

const MAMBA_PREFIX: &str = "mamba";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsmrnnModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// One GRU step in the reset/update/candidate form:
/// `r = σ(gi_r + gh_r)`, `z = σ(gi_z + gh_z)`, `n = tanh(gi_n + r ∘ gh_n)`,
/// `h' = (1 - z) ∘ n + z ∘ h`, where `gi`, `gh` are the `[*, 3d]` input and
/// hidden projections (bias included).
pub fn gru_cell(tape: &mut Tape, gi: Var, gh: Var, h: Var) -> Result<Var> {
    let d = *tape.shape(h).last().ok_or_else(|| Error::shape("gru_cell", &[], &[]))?;
    let axis = tape.shape(gi).len() - 1;
    if tape.shape(gi)[axis] != 3 * d || tape.shape(gh)[axis] != 3 * d {
        return Err(Error::shape("gru_cell", tape.shape(gi), tape.shape(h)));
    }
    let (gi_r, gi_z, gi_n) = (tape.narrow(gi, axis, 0, d)?, tape.narrow(gi, axis, d, d)?, tape.narrow(gi, axis, 2 * d, d)?);
    let (gh_r, gh_z, gh_n) = (tape.narrow(gh, axis, 0, d)?, tape.narrow(gh, axis, d, d)?, tape.narrow(gh, axis, 2 * d, d)?);
    let r = tape.add(gi_r, gh_r)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(gi_z, gh_z)?;
    let z = tape.sigmoid(z)?;
    let rn = tape.mul(r, gh_n)?;
    let n = tape.add(gi_n, rn)?;
    let n = tape.tanh(n)?;
    // n + z ∘ (h - n)
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

impl IsmrnnModel {
    /// Freshly initialized model; initialization is a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (l, n, d, w, c, m) = (
            config.lookback,
            config.n_segments(),
            config.d_model,
            config.seg_len,
            config.channels,
            config.m_segments(),
        );
        let inv_sqrt = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        if config.use_mamba {
            Self::mamba_spec(&config).init(&mut p, MAMBA_PREFIX, &mut rng);
        }
        if config.use_lr {
            p.insert("exp.w", uniform(&mut rng, &[n], 1.0));
            p.insert("exp.b", uniform(&mut rng, &[n], 1.0));
            if config.per_segment_compress {
                p.insert("cmp.w", uniform(&mut rng, &[n, d, l], inv_sqrt(l)));
                p.insert("cmp.b", uniform(&mut rng, &[n, d], inv_sqrt(l)));
            } else {
                p.insert("cmp.w", uniform(&mut rng, &[d, l], inv_sqrt(l)));
                p.insert("cmp.b", uniform(&mut rng, &[d], inv_sqrt(l)));
            }
            p.insert("res.w", uniform(&mut rng, &[d, l], inv_sqrt(l)));
            p.insert("res.b", uniform(&mut rng, &[d], inv_sqrt(l)));
        } else {
            p.insert("seg.w", uniform(&mut rng, &[d, w], inv_sqrt(w)));
            p.insert("seg.b", uniform(&mut rng, &[d], inv_sqrt(w)));
        }
        p.insert("gru.w_ih", uniform(&mut rng, &[3 * d, d], inv_sqrt(d)));
        p.insert("gru.w_hh", uniform(&mut rng, &[3 * d, d], inv_sqrt(d)));
        p.insert("gru.b_ih", uniform(&mut rng, &[3 * d], inv_sqrt(d)));
        p.insert("gru.b_hh", uniform(&mut rng, &[3 * d], inv_sqrt(d)));
        p.insert("dec.pos", normal(&mut rng, &[m, d / 2]));
        p.insert("dec.chan", normal(&mut rng, &[c, d / 2]));
        p.insert("head.w", uniform(&mut rng, &[w, d], inv_sqrt(d)));
        p.insert("head.b", uniform(&mut rng, &[w], inv_sqrt(d)));
        Ok(Self { config, params: p })
    }

    /// Wraps existing parameters after checking them against the config.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = Self::new(config.clone(), 0)?.params.inventory();
        let got = params.inventory();
        if expected.len() != got.len() {
            return Err(Error::Config(format!(
                "parameter inventory has {} entries, config expects {}",
                got.len(),
                expected.len()
            )));
        }
        for ((en, es), (gn, gs)) in expected.iter().zip(&got) {
            if en != gn {
                return Err(Error::Config(format!("expected parameter `{en}`, found `{gn}`")));
            }
            if es != gs {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: es.clone(),
                    rhs: gs.clone(),
                });
            }
        }
        Ok(Self { config, params })
    }

    fn mamba_spec(config: &ModelConfig) -> SsmBlockSpec {
        SsmBlockSpec {
            d_model: config.mamba_d_model(),
            d_state: config.d_state,
            use_conv: config.use_conv,
            conv_kernel: config.conv_kernel,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Expand each of `R` series to `n` rows (`X̄[j] = w_j x + b_j`) and compress
    /// each row from `L` to `d`. `x: [R, L]` -> `(X̄: [R, n, L], X̃: [R, n, d])`.
    pub fn implicit_segment(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        if !self.config.use_lr {
            return Err(Error::Config("implicit segmentation requires use_lr".into()));
        }
        let (l, n, d) = (self.config.lookback, self.config.n_segments(), self.config.d_model);
        let sx = tape.shape(x).to_vec();
        if sx.len() != 2 || sx[1] != l {
            return Err(Error::shape("implicit_segment", &sx, &[l]));
        }
        let rows = sx[0];
        let x3 = tape.reshape(x, &[rows, 1, l])?;
        let w = tape.reshape(p.get("exp.w")?, &[n, 1])?;
        let b = tape.reshape(p.get("exp.b")?, &[n, 1])?;
        let scaled = tape.mul(x3, w)?;
        let xbar = tape.add(scaled, b)?;
        let xtilde = if self.config.per_segment_compress {
            let (cw, cb) = (p.get("cmp.w")?, p.get("cmp.b")?);
            let mut segs = Vec::with_capacity(n);
            for j in 0..n {
                let row = tape.narrow(xbar, 1, j, 1)?;
                let wj = tape.narrow(cw, 0, j, 1)?;
                let wj = tape.reshape(wj, &[d, l])?;
                let bj = tape.narrow(cb, 0, j, 1)?;
                let bj = tape.reshape(bj, &[d])?;
                segs.push(tape.linear(row, wj, Some(bj))?);
            }
            tape.concat(&segs, 1)?
        } else {
            tape.linear(xbar, p.get("cmp.w")?, Some(p.get("cmp.b")?))?
        };
        Ok((xbar, xtilde))
    }

    /// Hard truncation into `n` blocks of width `w`, each mapped `w -> d`.
    /// `x: [R, L]` -> `[R, n, d]`.
    pub fn explicit_segment(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (l, n, w) = (self.config.lookback, self.config.n_segments(), self.config.seg_len);
        let sx = tape.shape(x).to_vec();
        if sx.len() != 2 || sx[1] != l {
            return Err(Error::shape("explicit_segment", &sx, &[l]));
        }
        if l % w != 0 {
            return Err(Error::param("seg_len", format!("lookback {l} not divisible by {w}")));
        }
        let blocks = tape.reshape(x, &[sx[0], n, w])?;
        tape.linear(blocks, p.get("seg.w")?, Some(p.get("seg.b")?))
    }

    /// Runs the GRU over `n` segment embeddings from a zero state.
    /// `xtilde: [R, n, d]` -> final hidden state `[R, d]`.
    pub fn gru_encode(&self, tape: &mut Tape, p: &Bound, xtilde: Var) -> Result<Var> {
        let s = tape.shape(xtilde).to_vec();
        let d = self.config.d_model;
        if s.len() != 3 || s[2] != d || s[1] == 0 {
            return Err(Error::shape("gru_encode", &s, &[d]));
        }
        let gi = tape.linear(xtilde, p.get("gru.w_ih")?, Some(p.get("gru.b_ih")?))?;
        let (w_hh, b_hh) = (p.get("gru.w_hh")?, p.get("gru.b_hh")?);
        let h0 = tape.constant(Tensor::zeros([s[0], d]));
        let (_, h_n) = tape.scan(h0, gi, |tape, h, gi_t| {
            let gh = tape.linear(h, w_hh, Some(b_hh))?;
            gru_cell(tape, gi_t, gh, h)
        })?;
        Ok(h_n)
    }

    /// Mean of `X̄` over the segment axis mapped `L -> d`. `[R, n, L]` -> `[R, d]`.
    pub fn residual_path(&self, tape: &mut Tape, p: &Bound, xbar: Var) -> Result<Var> {
        let pooled = tape.mean_axis(xbar, 1)?;
        tape.linear(pooled, p.get("res.w")?, Some(p.get("res.b")?))
    }

    /// Parallel multi-step decoding. `h: [R, d]`, `channel_of_row[r]` gives the
    /// channel index of row `r`. Returns `[R, H]` (still normalized).
    pub fn pmf_decode(&self, tape: &mut Tape, p: &Bound, h: Var, channel_of_row: &[usize]) -> Result<Var> {
        let (d, m, w, c, horizon) = (
            self.config.d_model,
            self.config.m_segments(),
            self.config.seg_len,
            self.config.channels,
            self.config.horizon,
        );
        let sh = tape.shape(h).to_vec();
        if sh.len() != 2 || sh[1] != d || sh[0] != channel_of_row.len() {
            return Err(Error::shape("pmf_decode", &sh, &[channel_of_row.len(), d]));
        }
        if let Some(&bad) = channel_of_row.iter().find(|&&ch| ch >= c) {
            return Err(Error::Index { index: bad, len: c });
        }
        let rows = sh[0];
        // Decoder inputs only depend on (channel, position): project the C*m
        // distinct ones, then gather.
        let pos_idx: Vec<usize> = (0..c).flat_map(|_| 0..m).collect();
        let chan_idx: Vec<usize> = (0..c).flat_map(|ch| std::iter::repeat_n(ch, m)).collect();
        let pos = tape.index_select(p.get("dec.pos")?, &pos_idx)?;
        let chan = tape.index_select(p.get("dec.chan")?, &chan_idx)?;
        let dec_in = tape.concat(&[pos, chan], 1)?;
        let gi_distinct = tape.linear(dec_in, p.get("gru.w_ih")?, Some(p.get("gru.b_ih")?))?;
        let gi_idx: Vec<usize> = channel_of_row.iter().flat_map(|&ch| (0..m).map(move |i| ch * m + i)).collect();
        let gi = tape.index_select(gi_distinct, &gi_idx)?;
        // The hidden projection is shared by all m positions of a row.
        let gh_rows = tape.linear(h, p.get("gru.w_hh")?, Some(p.get("gru.b_hh")?))?;
        let rep: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, m)).collect();
        let gh = tape.index_select(gh_rows, &rep)?;
        let h_rep = tape.index_select(h, &rep)?;
        let h_dec = gru_cell(tape, gi, gh, h_rep)?;
        let h_dec = tape.dropout(h_dec, self.config.dropout)?;
        let y = tape.linear(h_dec, p.get("head.w")?, Some(p.get("head.b")?))?;
        let y = tape.reshape(y, &[rows, m * w])?;
        if m * w == horizon {
            Ok(y)
        } else {
            tape.narrow(y, 1, 0, horizon)
        }
    }

    /// Normalized `B x L x C` windows through the selective-SSM block (if enabled).
    pub fn mamba_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let spec = Self::mamba_spec(&self.config);
        match self.config.mamba_width {
            MambaWidth::Channels => spec.forward(tape, p, MAMBA_PREFIX, x),
            MambaWidth::PerChannel => {
                let s = tape.shape(x).to_vec();
                let (b, l, c) = (s[0], s[1], s[2]);
                let xt = tape.permute(x, &[0, 2, 1])?;
                let xt = tape.reshape(xt, &[b * c, l, 1])?;
                let y = spec.forward(tape, p, MAMBA_PREFIX, xt)?;
                let y = tape.reshape(y, &[b, c, l])?;
                tape.permute(y, &[0, 2, 1])
            }
        }
    }

    /// `B x L x C` windows to `B x H x C` forecasts.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: &Tensor, mode: Mode) -> Result<Var> {
        let cfg = &self.config;
        let s = x.shape();
        if s.len() != 3 || s[1] != cfg.lookback || s[2] != cfg.channels {
            return Err(Error::shape("forward", s, &[cfg.lookback, cfg.channels]));
        }
        tape.set_training(mode == Mode::Train);
        let (b, l, c) = (s[0], s[1], s[2]);
        let (xn, anchor) = instance_norm(x, cfg.norm)?;
        let mut seq = tape.constant(xn);
        if cfg.use_mamba {
            seq = self.mamba_forward(tape, p, seq)?;
        }
        let rows = b * c;
        let flat = tape.permute(seq, &[0, 2, 1])?;
        let flat = tape.reshape(flat, &[rows, l])?;
        let h = if cfg.use_lr {
            let (xbar, xtilde) = self.implicit_segment(tape, p, flat)?;
            let h_n = self.gru_encode(tape, p, xtilde)?;
            let h_res = self.residual_path(tape, p, xbar)?;
            tape.add(h_n, h_res)?
        } else {
            let xtilde = self.explicit_segment(tape, p, flat)?;
            self.gru_encode(tape, p, xtilde)?
        };
        let channel_of_row: Vec<usize> = (0..rows).map(|r| r % c).collect();
        let y = self.pmf_decode(tape, p, h, &channel_of_row)?;
        let y = tape.reshape(y, &[b, c, cfg.horizon])?;
        let y = tape.permute(y, &[0, 2, 1])?;
        anchor.denormalize_var(tape, y)
    }

    /// Eval-mode forecast without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let y = self.forward(&mut tape, &p, x, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }
}
