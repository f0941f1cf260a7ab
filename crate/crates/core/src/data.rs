//! Benchmark CSV ingestion, temporal splits, standardization and sliding windows.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TIMESTAMP_FORMATS: &[&str] = &["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M:%S", "%Y/%m/%d %H:%M"];

/// How to read a benchmark CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Name of the timestamp column; it must be the first column.
    pub date_column: String,
    /// Declared sampling interval in seconds. Inferred from the first two rows when absent.
    pub frequency_secs: Option<i64>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date_column: "date".into(),
            frequency_secs: None,
        }
    }
}

/// A complete multivariate series, `T x C`, row-major.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Vec<f64>,
    pub channel_names: Vec<String>,
    pub frequency_secs: Option<i64>,
}

impl RawSeries {
    /// Builds a series without timestamps, e.g. synthetic data.
    pub fn from_values(values: Vec<f64>, channels: usize) -> Result<Self> {
        if channels == 0 || !values.len().is_multiple_of(channels) {
            return Err(Error::param("channels", format!("{} values do not tile {channels} channels", values.len())));
        }
        Ok(Self {
            timestamps: Vec::new(),
            values,
            channel_names: (0..channels).map(|c| format!("c{c}")).collect(),
            frequency_secs: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels() + c]
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// Reads a `date,<channel>,...` CSV. Missing or non-numeric cells are rejected.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<RawSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.get(0).map(str::trim) != Some(schema.date_column.as_str()) {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            row: 0,
            column: 0,
            reason: format!("first column must be `{}`", schema.date_column),
        });
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    if channel_names.is_empty() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            row: 0,
            column: 1,
            reason: "no value columns".into(),
        });
    }
    let c = channel_names.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != c + 1 {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                row,
                column: record.len(),
                reason: format!("expected {} cells, found {}", c + 1, record.len()),
            });
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| Error::Ingest {
            path: path.to_path_buf(),
            row,
            column: 0,
            reason: format!("unparsable timestamp `{}`", &record[0]),
        })?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(Error::Ordering {
                    path: path.to_path_buf(),
                    row,
                });
            }
        }
        timestamps.push(ts);
        for col in 1..=c {
            let cell = record[col].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                path: path.to_path_buf(),
                row,
                column: col,
                reason: format!("unparsable value `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    path: path.to_path_buf(),
                    row,
                    column: col,
                    reason: "missing value".into(),
                });
            }
            values.push(v);
        }
    }
    let frequency_secs = schema
        .frequency_secs
        .or_else(|| (timestamps.len() >= 2).then(|| (timestamps[1] - timestamps[0]).num_seconds()));
    Ok(RawSeries {
        timestamps,
        values,
        channel_names,
        frequency_secs,
    })
}

/// How a series is cut into train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitConvention {
    /// Fractions of the whole series, in temporal order.
    Ratio { train: f64, val: f64, test: f64 },
    /// 12/4/4 months of hourly ETT data (8640/2880/2880 points).
    EttHour,
    /// 12/4/4 months of 15-minute ETT data (34560/11520/11520 points).
    EttMinute,
}

impl Default for SplitConvention {
    fn default() -> Self {
        SplitConvention::Ratio {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Contiguous, non-overlapping point ranges in temporal order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// The points windows of `split` may read: the split itself plus up to
    /// `lookback` points of context from the preceding split.
    pub fn window_range(&self, split: Split, lookback: usize) -> Range<usize> {
        let r = self.range(split);
        r.start.saturating_sub(lookback)..r.end
    }
}

/// Cuts `len` points according to `convention`; each split must hold at least
/// `lookback + horizon` points.
pub fn split(len: usize, convention: SplitConvention, lookback: usize, horizon: usize) -> Result<SplitRanges> {
    let (n_train, n_val, n_test) = match convention {
        SplitConvention::Ratio { train, val, test } => {
            if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r)) || ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("split ratios ({train}, {val}, {test}) must be in [0,1] and sum to 1")));
            }
            let n_train = (len as f64 * train) as usize;
            let n_test = (len as f64 * test) as usize;
            (n_train, len.saturating_sub(n_train + n_test), n_test)
        }
        SplitConvention::EttHour => (12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24),
        SplitConvention::EttMinute => (12 * 30 * 24 * 4, 4 * 30 * 24 * 4, 4 * 30 * 24 * 4),
    };
    if n_train + n_val + n_test > len {
        return Err(Error::Config(format!(
            "series of {len} points is shorter than the split borders ({n_train}+{n_val}+{n_test})"
        )));
    }
    let need = lookback + horizon;
    for (name, n) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if n < need {
            return Err(Error::Config(format!(
                "{name} split holds {n} points, fewer than lookback+horizon = {need}"
            )));
        }
    }
    Ok(SplitRanges {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..n_train + n_val + n_test,
    })
}

/// Per-channel standardization fit on the training range only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(series: &RawSeries, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > series.len() {
            return Err(Error::Config(format!("invalid scaler range {range:?} for {} points", series.len())));
        }
        let c = series.channels();
        let n = range.len() as f64;
        let mut mean = vec![0.0; c];
        for t in range.clone() {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += series.value(t, ch);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for t in range {
            for (ch, v) in var.iter_mut().enumerate() {
                let d = series.value(t, ch) - mean[ch];
                *v += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        if let Some(channel) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::DegenerateChannel { channel });
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
    }

    pub fn inverse(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
    }
}

/// Standardizes the whole series with statistics from `train_range`.
pub fn fit_apply_scaler(series: &RawSeries, train_range: Range<usize>) -> Result<(RawSeries, Scaler)> {
    let scaler = Scaler::fit(series, train_range)?;
    let mut out = series.clone();
    scaler.transform(&mut out.values);
    Ok((out, scaler))
}

/// Sliding `(lookback, horizon)` pairs over a contiguous range of a series.
///
/// Windows are materialized on demand from a shared copy of the source.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    source: Arc<Vec<f64>>,
    channels: usize,
    lookback: usize,
    horizon: usize,
    starts: Vec<usize>,
    pub split: Split,
}

/// Pairs `inputs[i] = [s+i, s+i+L)`, `targets[i] = [s+i+L, s+i+L+H)` for every
/// window fully inside `range` (advancing by `stride`).
pub fn make_windows(
    series: &RawSeries,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
    split: Split,
) -> Result<WindowedDataset> {
    if lookback == 0 {
        return Err(Error::param("lookback", "must be positive"));
    }
    if horizon == 0 {
        return Err(Error::param("horizon", "must be positive"));
    }
    if stride == 0 {
        return Err(Error::param("stride", "must be positive"));
    }
    if range.end > series.len() {
        return Err(Error::Config(format!("range {range:?} exceeds series of {} points", series.len())));
    }
    if range.len() < lookback + horizon {
        return Err(Error::Config(format!(
            "range of {} points cannot hold one window of {lookback}+{horizon}",
            range.len()
        )));
    }
    let count = range.len() - lookback - horizon + 1;
    let starts = (0..count).step_by(stride).map(|i| range.start + i).collect();
    Ok(WindowedDataset {
        source: Arc::new(series.values.clone()),
        channels: series.channels(),
        lookback,
        horizon,
        starts,
        split,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Source offset of the first input point of window `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.starts
    }

    fn block(&self, start: usize, len: usize) -> &[f64] {
        &self.source[start * self.channels..(start + len) * self.channels]
    }

    /// `L x C` input of window `i`.
    pub fn input(&self, i: usize) -> &[f64] {
        self.block(self.starts[i], self.lookback)
    }

    /// `H x C` target of window `i`.
    pub fn target(&self, i: usize) -> &[f64] {
        self.block(self.starts[i] + self.lookback, self.horizon)
    }

    /// Stacks the selected windows into `B x L x C` inputs and `B x H x C` targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut x = Vec::with_capacity(indices.len() * self.lookback * self.channels);
        let mut y = Vec::with_capacity(indices.len() * self.horizon * self.channels);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index { index: i, len: self.len() });
            }
            x.extend_from_slice(self.input(i));
            y.extend_from_slice(self.target(i));
        }
        Ok((
            Tensor::new([indices.len(), self.lookback, self.channels], x)?,
            Tensor::new([indices.len(), self.horizon, self.channels], y)?,
        ))
    }

    /// Restricts the dataset to a subset of its windows.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let starts = indices
            .iter()
            .map(|&i| self.starts.get(i).copied().ok_or(Error::Index { index: i, len: self.len() }))
            .collect::<Result<_>>()?;
        Ok(Self {
            starts,
            ..self.clone()
        })
    }
}

/// A standardized series with its three windowed splits.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub series: RawSeries,
    pub scaler: Scaler,
    pub ranges: SplitRanges,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

/// Splits `raw`, standardizes it on the training range, and windows every split
/// (validation and test windows take their lookback from the preceding split).
pub fn prepare(
    raw: &RawSeries,
    id: &str,
    convention: SplitConvention,
    lookback: usize,
    horizon: usize,
) -> Result<Prepared> {
    let ranges = split(raw.len(), convention, lookback, horizon)?;
    let (series, scaler) = fit_apply_scaler(raw, ranges.train.clone())?;
    let win = |s: Split| make_windows(&series, ranges.window_range(s, lookback), lookback, horizon, 1, s);
    let (train, val, test) = (win(Split::Train)?, win(Split::Val)?, win(Split::Test)?);
    Ok(Prepared {
        id: id.to_string(),
        series,
        scaler,
        ranges,
        train,
        val,
        test,
    })
}

impl Prepared {
    pub fn dataset(&self, split: Split) -> &WindowedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Sample indices for one epoch, grouped into batches. The last batch may be short.
///
/// With `shuffle`, the order is a pure function of `(seed, epoch)`.
pub fn batch_iter(len: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::param("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
