//! Loss, Adam, the step-decay schedule, and the epoch loop with
//! best-validation selection.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, WindowedDataset};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{IsmrnnModel, Mode, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Last epoch trained at the base rate.
    pub decay_start: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            decay_start: 15,
            decay_factor: 0.9,
            batch_size: 256,
            seed: 2024,
            loss: LossKind::Mse,
            patience: None,
            grad_clip: Some(5.0),
            max_steps: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::param("decay_factor", format!("{} outside (0, 1]", self.decay_factor)));
        }
        if self.decay_start > self.epochs {
            return Err(Error::param(
                "decay_start",
                format!("{} exceeds epochs {}", self.decay_start, self.epochs),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::param("grad_clip", format!("{c} must be positive")));
            }
        }
        if self.patience == Some(0) {
            return Err(Error::param("patience", "must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`: `lr` through `decay_start`, then
/// multiplied by `decay_factor` once per further epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch <= cfg.decay_start {
        cfg.lr
    } else {
        (cfg.decay_start..epoch).fold(cfg.lr, |lr, _| lr * cfg.decay_factor)
    }
}

/// Mean squared or absolute error as a differentiable scalar.
pub fn loss(tape: &mut Tape, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape("loss", tape.shape(pred), tape.shape(target)));
    }
    let diff = tape.sub(pred, target)?;
    let e = match kind {
        LossKind::Mse => tape.mul(diff, diff)?,
        LossKind::Mae => tape.abs(diff)?,
    };
    tape.mean_all(e)
}

/// Plain-value version of [`loss`].
pub fn loss_value(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("loss", pred.shape(), target.shape()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| match kind {
            LossKind::Mse => (p - t) * (p - t),
            LossKind::Mae => (p - t).abs(),
        })
        .sum();
    Ok(sum / pred.numel() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: IndexMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients by name
/// before touching any parameter.
pub fn adam_step(params: &mut ParamStore, grads: &IndexMap<String, Tensor>, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::State(format!("missing gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in `{name}` at element {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).ok_or_else(|| Error::State(format!("no moment for `{name}`")))?;
        let m = m.data_mut();
        let v = state.v.get_mut(name).ok_or_else(|| Error::State(format!("no moment for `{name}`")))?;
        let v = v.data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_loss,val_loss,lr`, with floats in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.records {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_loss <= r.val_loss => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub model: IsmrnnModel,
    /// Optimizer state at the end of training.
    pub state: TrainState,
    pub history: History,
    pub epoch_seconds: Vec<f64>,
    pub steps: u64,
    pub peak_tape_bytes: usize,
}

/// Dropout stream for optimizer step `step`.
fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ (step.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Forward, loss, and backward on one batch; returns the loss and gradients.
pub fn compute_gradients(
    model: &IsmrnnModel,
    x: &Tensor,
    y: &Tensor,
    kind: LossKind,
    dropout_seed: u64,
) -> Result<(f64, IndexMap<String, Tensor>, usize)> {
    let mut tape = Tape::with_seed(dropout_seed);
    let p = model.params.bind(&mut tape, true);
    let pred = model.forward(&mut tape, &p, x, Mode::Train)?;
    let target = tape.constant(y.clone());
    let l = loss(&mut tape, pred, target, kind)?;
    let value = tape.value(l).data()[0];
    tape.backward(l)?;
    Ok((value, p.grads(&tape)?, tape.peak_bytes()))
}

/// Trains `model` on `train`, selecting the epoch with the lowest validation MSE.
pub fn fit(model: &IsmrnnModel, train: &WindowedDataset, val: &WindowedDataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut current = model.clone();
    let mut state = TrainState {
        adam: AdamState::new(&model.params),
        epoch: 0,
        best_val: f64::INFINITY,
        best_epoch: 0,
    };
    let mut best = model.clone();
    let mut history = History::default();
    let mut epoch_seconds = Vec::new();
    let mut peak = 0;
    let mut stale = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let batches = batch_iter(train.len(), cfg.batch_size, cfg.shuffle, cfg.seed, epoch as u64)?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let mut capped = false;
        for (bi, idx) in batches.iter().enumerate() {
            let (x, y) = train.batch(idx)?;
            let (l, mut grads, bytes) = compute_gradients(&current, &x, &y, cfg.loss, step_seed(cfg.seed, state.adam.step))?;
            peak = peak.max(bytes);
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut current.params, &grads, &mut state.adam, lr)?;
            loss_sum += l * idx.len() as f64;
            seen += idx.len();
            if cfg.max_steps.is_some_and(|m| state.adam.step as usize >= m) {
                capped = true;
                break;
            }
        }
        let val_loss = evaluate(&current, val, cfg.batch_size)?.mse;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        epoch_seconds.push(started.elapsed().as_secs_f64());
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            lr,
        });
        state.epoch = epoch;
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best_epoch = epoch;
            best = current.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        if capped || cfg.patience.is_some_and(|p| stale >= p) {
            break 'epochs;
        }
    }
    Ok(FitOutcome {
        model: best,
        steps: state.adam.step,
        state,
        history,
        epoch_seconds,
        peak_tape_bytes: peak,
    })
}
