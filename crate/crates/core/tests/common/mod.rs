#![allow(dead_code)]

use ismrnn::data::{make_windows, RawSeries, Split, WindowedDataset};
use ismrnn::model::{instance_norm, IsmrnnModel, ModelConfig, Mode, ParamStore};
use ismrnn::tensor::{finite_difference_oracle, relative_error, NumericGrad, Tape, Tensor, Var};
use ismrnn::train::{loss, LossKind};
use ismrnn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// L=8, C=2, w=4, n=2, d=6, H=4, d_state=2, every toggle on, no dropout.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_state: 2,
        use_conv: true,
        ..ModelConfig::new(8, 4, 2, 4, 6)
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Two sine channels of different period, `windows` (L, H) pairs.
pub fn sine_dataset(windows: usize, lookback: usize, horizon: usize) -> WindowedDataset {
    let len = windows + lookback + horizon - 1;
    let values: Vec<f64> = (0..len)
        .flat_map(|t| {
            let t = t as f64;
            [(t * 0.3).sin(), (t * 0.17).cos() * 0.5]
        })
        .collect();
    let series = RawSeries::from_values(values, 2).unwrap();
    make_windows(&series, 0..len, lookback, horizon, 1, Split::Train).unwrap()
}

/// MSE of the model on `(x, y)` for the given parameter vector.
pub fn objective(model: &IsmrnnModel, flat: &[f64], x: &Tensor, y: &Tensor) -> f64 {
    let mut m = model.clone();
    m.params.assign_flat(flat).unwrap();
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let pred = m.forward(&mut tape, &p, x, Mode::Eval).unwrap();
    let t = tape.constant(y.clone());
    let l = loss(&mut tape, pred, t, LossKind::Mse).unwrap();
    tape.value(l).data()[0]
}

/// Per-parameter worst relative error of reverse-mode against central
/// differences with step `h`. Kinks are skipped.
pub fn model_gradient_errors(model: &IsmrnnModel, x: &Tensor, y: &Tensor, h: f64, floor: f64) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let pred = model.forward(&mut tape, &p, x, Mode::Eval).unwrap();
    let t = tape.constant(y.clone());
    let l = loss(&mut tape, pred, t, LossKind::Mse).unwrap();
    tape.backward(l).unwrap();
    let grads = p.grads(&tape).unwrap();
    let flat = model.params.flatten();
    let numeric = finite_difference_oracle(|f| objective(model, f, x, y), &flat, h).unwrap();
    let mut out = Vec::new();
    let mut off = 0;
    for (name, g) in &grads {
        let n = g.numel();
        let worst = g
            .data()
            .iter()
            .zip(&numeric[off..off + n])
            .filter_map(|(a, num)| match num {
                NumericGrad::Value(b) => Some(relative_error(*a, *b, floor)),
                NumericGrad::NonComparable => None,
            })
            .fold(0.0, f64::max);
        out.push((name.clone(), worst));
        off += n;
    }
    out
}

fn reference_cell(tape: &mut Tape, gi: Var, gh: Var, h: Var, d: usize) -> Result<Var> {
    let part = |tape: &mut Tape, v: Var, k: usize| tape.narrow(v, 1, k * d, d);
    let (ir, iz, inn) = (part(tape, gi, 0)?, part(tape, gi, 1)?, part(tape, gi, 2)?);
    let (hr, hz, hn) = (part(tape, gh, 0)?, part(tape, gh, 1)?, part(tape, gh, 2)?);
    let r = tape.add(ir, hr)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(iz, hz)?;
    let z = tape.sigmoid(z)?;
    let rh = tape.mul(r, hn)?;
    let n = tape.add(inn, rh)?;
    let n = tape.tanh(n)?;
    let hm = tape.sub(h, n)?;
    let zh = tape.mul(z, hm)?;
    tape.add(n, zh)
}

/// Explicit-segment GRU forecaster written segment by segment, decoding with
/// fully materialized (position, channel) inputs for every sequence.
pub fn segrnn_reference(params: &ParamStore, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (w, d, h) = (cfg.seg_len, cfg.d_model, cfg.horizon);
    let (n, m) = (l / w, h.div_ceil(w));
    let (xn, anchor) = instance_norm(x, cfg.norm)?;
    let mut tape = Tape::new();
    let p = |tape: &mut Tape, k: &str| tape.constant(params.get(k).unwrap().clone());
    let (seg_w, seg_b) = (p(&mut tape, "seg.w"), p(&mut tape, "seg.b"));
    let (w_ih, w_hh) = (p(&mut tape, "gru.w_ih"), p(&mut tape, "gru.w_hh"));
    let (b_ih, b_hh) = (p(&mut tape, "gru.b_ih"), p(&mut tape, "gru.b_hh"));
    let (pos, chan) = (p(&mut tape, "dec.pos"), p(&mut tape, "dec.chan"));
    let (head_w, head_b) = (p(&mut tape, "head.w"), p(&mut tape, "head.b"));

    // [B, L, C] -> [B*C, L], one row per (window, channel).
    let mut rows = Vec::with_capacity(b * c * l);
    for bi in 0..b {
        for ch in 0..c {
            rows.extend((0..l).map(|t| xn.data()[(bi * l + t) * c + ch]));
        }
    }
    let r = b * c;
    let series = tape.constant(Tensor::new([r, l], rows)?);
    let mut hid = tape.constant(Tensor::zeros([r, d]));
    for j in 0..n {
        let seg = tape.narrow(series, 1, j * w, w)?;
        let e = tape.linear(seg, seg_w, Some(seg_b))?;
        let gi = tape.linear(e, w_ih, Some(b_ih))?;
        let gh = tape.linear(hid, w_hh, Some(b_hh))?;
        hid = reference_cell(&mut tape, gi, gh, hid, d)?;
    }
    // Row k of the decoder batch is sequence k / m at output segment k % m.
    let seq_of: Vec<usize> = (0..r * m).map(|k| k / m).collect();
    let pos_of: Vec<usize> = (0..r * m).map(|k| k % m).collect();
    let chan_of: Vec<usize> = (0..r * m).map(|k| (k / m) % c).collect();
    let pe = tape.index_select(pos, &pos_of)?;
    let ce = tape.index_select(chan, &chan_of)?;
    let dec_in = tape.concat(&[pe, ce], 1)?;
    let h_rep = tape.index_select(hid, &seq_of)?;
    let gi = tape.linear(dec_in, w_ih, Some(b_ih))?;
    let gh = tape.linear(h_rep, w_hh, Some(b_hh))?;
    let out = reference_cell(&mut tape, gi, gh, h_rep, d)?;
    let y = tape.linear(out, head_w, Some(head_b))?;
    let y = tape.value(y).data().to_vec();
    // [R*m, w] -> [B, H, C]
    let mut pred = vec![0.0; b * h * c];
    for bi in 0..b {
        for ch in 0..c {
            let row = bi * c + ch;
            for t in 0..h {
                pred[(bi * h + t) * c + ch] = y[row * m * w + t];
            }
        }
    }
    anchor.denormalize(&Tensor::new([b, h, c], pred)?)
}
