//! Test metrics, experiment reports, the four-way ablation, the lookback
//! sweep, efficiency profiling, and prediction dumps.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batch_iter, prepare, Prepared, RawSeries, SplitConvention, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{IsmrnnModel, ModelConfig, Variant};
use crate::tensor::Tensor;
use crate::train::{compute_gradients, fit, AdamState, FitOutcome, TrainConfig};
use crate::train::{adam_step, clip_grad_norm, lr_at};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Number of scalar predictions scored.
    pub count: usize,
}

/// Running sums; the division happens once, so batching cannot change results.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    sq: f64,
    abs: f64,
    count: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &[f64], truth: &[f64]) {
        for (p, t) in pred.iter().zip(truth) {
            let d = p - t;
            self.sq += d * d;
            self.abs += d.abs();
        }
        self.count += pred.len().min(truth.len());
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::Config("no predictions to score".into()));
        }
        let n = self.count as f64;
        Ok(Metrics {
            mse: self.sq / n,
            mae: self.abs / n,
            count: self.count,
        })
    }
}

/// Scores an arbitrary `B x L x C -> B x H x C` predictor.
pub fn evaluate_with<F>(ds: &WindowedDataset, batch_size: usize, mut predict: F) -> Result<Metrics>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut acc = MetricAccumulator::default();
    for idx in batch_iter(ds.len(), batch_size, false, 0, 0)? {
        let (x, y) = ds.batch(&idx)?;
        let pred = predict(&x)?;
        if pred.shape() != y.shape() {
            return Err(Error::shape("evaluate", pred.shape(), y.shape()));
        }
        // Per-window sums keep the reduction order independent of batching.
        let per = y.numel() / idx.len();
        for (p, t) in pred.data().chunks(per).zip(y.data().chunks(per)) {
            acc.add(p, t);
        }
    }
    acc.finish()
}

/// MSE and MAE of `model` over every window, element, and channel of `ds`.
pub fn evaluate(model: &IsmrnnModel, ds: &WindowedDataset, batch_size: usize) -> Result<Metrics> {
    if ds.horizon() != model.config.horizon || ds.lookback() != model.config.lookback {
        return Err(Error::shape(
            "evaluate",
            &[model.config.lookback, model.config.horizon],
            &[ds.lookback(), ds.horizon()],
        ));
    }
    evaluate_with(ds, batch_size, |x| model.predict(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub horizon: usize,
    pub lookback: usize,
    pub variant: String,
    pub use_conv: bool,
    pub mse: f64,
    pub mae: f64,
    pub val_mse: f64,
    pub best_epoch: usize,
    pub epoch_seconds: Vec<f64>,
    pub peak_tape_bytes: usize,
    pub peak_rss_bytes: Option<u64>,
    pub param_count: usize,
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
}

impl ExperimentReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON of everything that defines a run.
pub fn config_hash(dataset: &str, model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    let doc = serde_json::json!({ "dataset": dataset, "model": model, "train": train });
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&doc)?)))
}

/// Hex SHA-256 of a series' values (little-endian `f64`).
pub fn data_hash(series: &RawSeries) -> String {
    let mut h = Sha256::new();
    for v in &series.values {
        h.update(v.to_le_bytes());
    }
    h.update((series.channels() as u64).to_le_bytes());
    hex::encode(h.finalize())
}

/// Peak resident set size of this process, where the OS reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Trains one configuration and scores it on the test split.
pub fn run_experiment(data: &Prepared, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<(ExperimentReport, FitOutcome)> {
    let model = IsmrnnModel::new(model_cfg.clone(), train_cfg.seed)?;
    let outcome = fit(&model, &data.train, &data.val, train_cfg)?;
    let test = evaluate(&outcome.model, &data.test, train_cfg.batch_size)?;
    if !(test.mse.is_finite() && test.mae.is_finite()) {
        return Err(Error::Numeric("non-finite test metrics".into()));
    }
    let report = ExperimentReport {
        dataset: data.id.clone(),
        horizon: model_cfg.horizon,
        lookback: model_cfg.lookback,
        variant: model_cfg.variant().tag().to_string(),
        use_conv: model_cfg.use_conv,
        mse: test.mse,
        mae: test.mae,
        val_mse: outcome.state.best_val,
        best_epoch: outcome.state.best_epoch,
        epoch_seconds: outcome.epoch_seconds.clone(),
        peak_tape_bytes: outcome.peak_tape_bytes,
        peak_rss_bytes: peak_rss_bytes(),
        param_count: outcome.model.param_count(),
        seed: train_cfg.seed,
        config_hash: config_hash(&data.id, model_cfg, train_cfg)?,
        data_hash: data_hash(&data.series),
    };
    Ok((report, outcome))
}

/// Trains the four variants (M&LR, LR, M, none) under one seed and budget.
pub fn run_ablation(data: &Prepared, base: &ModelConfig, train_cfg: &TrainConfig) -> Result<Vec<(ExperimentReport, FitOutcome)>> {
    Variant::ALL
        .into_iter()
        .map(|v| run_experiment(data, &base.clone().with_variant(v), train_cfg))
        .collect()
}

/// For each lookback, trains the full model and the plain variant; reports come
/// in `(M&LR, none)` pairs.
pub fn lookback_sweep(
    raw: &RawSeries,
    id: &str,
    convention: SplitConvention,
    base: &ModelConfig,
    lookbacks: &[usize],
    train_cfg: &TrainConfig,
) -> Result<Vec<ExperimentReport>> {
    for &l in lookbacks {
        if l == 0 || l % base.seg_len != 0 {
            return Err(Error::param(
                "lookbacks",
                format!("lookback {l} is not a positive multiple of seg_len {}", base.seg_len),
            ));
        }
    }
    let mut out = Vec::with_capacity(2 * lookbacks.len());
    for &l in lookbacks {
        let data = prepare(raw, id, convention, l, base.horizon)?;
        for v in [Variant::MambaLr, Variant::Plain] {
            let cfg = ModelConfig {
                lookback: l,
                ..base.clone()
            }
            .with_variant(v);
            out.push(run_experiment(&data, &cfg, train_cfg)?.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub epoch_seconds: f64,
    pub steps: usize,
    pub peak_tape_bytes: usize,
    pub peak_rss_bytes: Option<u64>,
    pub param_count: usize,
}

/// Times one training epoch (or its first `max_steps` batches) at `batch_size`.
pub fn profile(model: &IsmrnnModel, train: &WindowedDataset, batch_size: usize, train_cfg: &TrainConfig) -> Result<Profile> {
    let mut model = model.clone();
    let mut adam = AdamState::new(&model.params);
    let batches = batch_iter(train.len(), batch_size, train_cfg.shuffle, train_cfg.seed, 1)?;
    let limit = train_cfg.max_steps.unwrap_or(usize::MAX);
    let started = Instant::now();
    let mut peak = 0;
    let mut steps = 0;
    for idx in batches.iter().take(limit) {
        let (x, y) = train.batch(idx)?;
        let (_, mut grads, bytes) = compute_gradients(&model, &x, &y, train_cfg.loss, train_cfg.seed ^ steps as u64)?;
        if let Some(c) = train_cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        adam_step(&mut model.params, &grads, &mut adam, lr_at(1, train_cfg))?;
        peak = peak.max(bytes);
        steps += 1;
    }
    Ok(Profile {
        epoch_seconds: started.elapsed().as_secs_f64(),
        steps,
        peak_tape_bytes: peak,
        peak_rss_bytes: peak_rss_bytes(),
        param_count: model.param_count(),
    })
}

/// Writes `window,t,channel,y_true,y_pred,split` rows for the selected windows.
/// Lookback rows have `t < 0` and an empty `y_pred`; values are in
/// standardized units.
pub fn dump_predictions(model: &IsmrnnModel, ds: &WindowedDataset, indices: &[usize], path: impl AsRef<Path>) -> Result<()> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::Index { index: bad, len: ds.len() });
    }
    let (l, h, c) = (ds.lookback(), ds.horizon(), ds.channels());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window", "t", "channel", "y_true", "y_pred", "split"])?;
    let split = ds.split.as_str();
    for &i in indices {
        let (x, _) = ds.batch(&[i])?;
        let pred = model.predict(&x)?;
        let (input, target) = (ds.input(i), ds.target(i));
        for ch in 0..c {
            for t in 0..l {
                let tt = t as i64 - l as i64;
                w.write_record([
                    i.to_string(),
                    tt.to_string(),
                    ch.to_string(),
                    format!("{:?}", input[t * c + ch]),
                    String::new(),
                    split.to_string(),
                ])?;
            }
            for t in 0..h {
                w.write_record([
                    i.to_string(),
                    t.to_string(),
                    ch.to_string(),
                    format!("{:?}", target[t * c + ch]),
                    format!("{:?}", pred.data()[t * c + ch]),
                    split.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Re-scores a prediction dump from its horizon rows.
pub fn rescore_dump(path: impl AsRef<Path>) -> Result<Metrics> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut acc = MetricAccumulator::default();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let pred = rec.get(4).unwrap_or("");
        if pred.is_empty() {
            continue;
        }
        let parse = |col: usize, s: &str| {
            s.parse::<f64>().map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                row: row + 2,
                column: col,
                reason: e.to_string(),
            })
        };
        let p = parse(4, pred)?;
        let t = parse(3, rec.get(3).unwrap_or(""))?;
        acc.add(&[p], &[t]);
    }
    acc.finish()
}

/// `dataset,horizon,lookback,variant,use_conv,seed,mse,mae` rows.
pub fn write_aggregate_csv(reports: &[ExperimentReport], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "dataset,horizon,lookback,variant,use_conv,seed,mse,mae")?;
    for r in reports {
        writeln!(
            f,
            "{},{},{},{},{},{},{:?},{:?}",
            r.dataset, r.horizon, r.lookback, r.variant, r.use_conv, r.seed, r.mse, r.mae
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_divides_once() {
        let mut a = MetricAccumulator::default();
        a.add(&[0.0, 2.0], &[1.0, 1.0]);
        let m = a.finish().unwrap();
        assert_eq!((m.mse, m.mae, m.count), (1.0, 1.0, 2));
        assert!(MetricAccumulator::default().finish().is_err());
    }

    #[test]
    fn hashes_are_stable_and_distinct() {
        let m = ModelConfig::new(8, 4, 2, 4, 6);
        let t = TrainConfig::default();
        let a = config_hash("x", &m, &t).unwrap();
        assert_eq!(a, config_hash("x", &m, &t).unwrap());
        assert_ne!(a, config_hash("y", &m, &t).unwrap());
        assert_eq!(a.len(), 64);
    }
}
