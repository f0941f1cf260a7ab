//! Flat key-value run configuration.
//!
//! A config file is a TOML document of top-level `key = value` pairs. Every key
//! is optional except `horizon`; `--set key=value` overrides are applied on top
//! of the file before validation.

use std::path::{Path, PathBuf};

use ismrnn::data::SplitConvention;
use ismrnn::model::{MambaWidth, ModelConfig, NormKind, Variant};
use ismrnn::train::{LossKind, TrainConfig};
use ismrnn::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every accepted key, with its resolved value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset identifier; picks the split convention for the ETT family.
    pub dataset: String,
    pub data_path: Option<PathBuf>,
    /// `ett_hour`, `ett_minute`, or `ratio` (0.7/0.1/0.2).
    pub split: String,
    pub out_dir: PathBuf,

    pub lookback: usize,
    pub horizon: usize,
    pub seg_len: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub dropout: f64,
    pub use_mamba: bool,
    pub use_lr: bool,
    pub use_conv: bool,
    pub conv_kernel: usize,
    /// `last_value` or `mean_std`.
    pub norm: String,
    /// `channels` or `per_channel`.
    pub mamba_width: String,
    pub per_segment_compress: bool,

    pub epochs: usize,
    pub lr: f64,
    pub decay_start: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// `mse` or `mae`.
    pub loss: String,
    /// 0 disables early stopping.
    pub patience: usize,
    /// 0 disables clipping.
    pub grad_clip: f64,
    /// 0 means no cap.
    pub max_steps: usize,

    /// Restrict `d_state` and `seg_len` to the published configurations.
    pub strict_domains: bool,
    pub checkpoint: Option<PathBuf>,
    pub lookbacks: Vec<usize>,
    pub profile_batch: usize,
    pub dump_split: String,
    pub dump_windows: Vec<usize>,
}

/// All keys, for unknown-key detection.
pub const KEYS: &[&str] = &[
    "dataset",
    "data_path",
    "split",
    "out_dir",
    "lookback",
    "horizon",
    "seg_len",
    "d_model",
    "d_state",
    "dropout",
    "use_mamba",
    "use_lr",
    "use_conv",
    "conv_kernel",
    "norm",
    "mamba_width",
    "per_segment_compress",
    "epochs",
    "lr",
    "decay_start",
    "decay_factor",
    "batch_size",
    "seed",
    "loss",
    "patience",
    "grad_clip",
    "max_steps",
    "strict_domains",
    "checkpoint",
    "lookbacks",
    "profile_batch",
    "dump_split",
    "dump_windows",
];

fn default_table() -> toml::Table {
    let doc = r#"
        dataset = "custom"
        out_dir = "runs"
        lookback = 96
        seg_len = 24
        d_model = 512
        d_state = 4
        dropout = 0.0
        use_mamba = true
        use_lr = true
        use_conv = false
        conv_kernel = 4
        norm = "last_value"
        mamba_width = "channels"
        per_segment_compress = false
        epochs = 30
        lr = 0.001
        decay_factor = 0.9
        batch_size = 256
        seed = 2024
        loss = "mse"
        patience = 0
        grad_clip = 5.0
        max_steps = 0
        strict_domains = false
        lookbacks = [48, 96, 192, 336]
        profile_batch = 8
        dump_split = "test"
        dump_windows = [0]
    "#;
    doc.parse().expect("built-in defaults parse")
}

/// Parses one `key=value` override; the value is read as a TOML value and
/// falls back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let key = k.trim().to_string();
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((key, value))
}

/// Reads `path` (or nothing), applies overrides, fills defaults and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    parse_table(table)
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    parse_table(text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?)
}

fn parse_table(table: toml::Table) -> Result<RunConfig> {
    for (k, v) in &table {
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        if v.is_table() {
            return Err(Error::Config(format!("key `{k}`: nested tables are not allowed")));
        }
    }
    if !table.contains_key("horizon") {
        return Err(Error::Config("missing required key `horizon`".into()));
    }
    let explicit_decay = table.contains_key("decay_start");
    let mut merged = default_table();
    let defaults = merged.clone();
    for (k, v) in table {
        merged.insert(k, v);
    }
    if !explicit_decay {
        let epochs = merged.get("epochs").and_then(toml::Value::as_integer).unwrap_or(30);
        merged.insert("decay_start".into(), toml::Value::Integer(epochs.min(15)));
    }
    if !merged.contains_key("split") {
        let id = merged.get("dataset").and_then(toml::Value::as_str).unwrap_or("");
        merged.insert("split".into(), toml::Value::String(default_split(id).into()));
    }
    // Type-check key by key so errors name the key.
    for (k, v) in &merged {
        let want = match defaults.get(k) {
            Some(d) => d.type_str(),
            None if k == "horizon" || k == "decay_start" => "integer",
            None => "string",
        };
        let compatible = want == v.type_str() || (want == "float" && v.is_integer());
        if !compatible {
            return Err(bad(k, format!("expected {want}, found {}", v.type_str())));
        }
        let negative = match v {
            toml::Value::Integer(i) => *i < 0,
            toml::Value::Array(a) => a.iter().any(|x| x.as_integer().is_none_or(|i| i < 0)),
            _ => false,
        };
        if negative {
            return Err(bad(k, "expected non-negative integers"));
        }
    }
    for k in ["dropout", "lr", "decay_factor", "grad_clip"] {
        if let Some(i) = merged.get(k).and_then(toml::Value::as_integer) {
            merged.insert(k.into(), toml::Value::Float(i as f64));
        }
    }
    let cfg: RunConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn default_split(dataset: &str) -> &'static str {
    let id = dataset.to_ascii_lowercase();
    if id.starts_with("etth") {
        "ett_hour"
    } else if id.starts_with("ettm") {
        "ett_minute"
    } else {
        "ratio"
    }
}

fn bad(key: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config(format!("key `{key}`: {reason}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.split_convention()?;
        self.norm_kind()?;
        self.width()?;
        self.loss_kind()?;
        self.dump_split()?;
        for (k, v) in [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("seg_len", self.seg_len),
            ("d_model", self.d_model),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("profile_batch", self.profile_batch),
        ] {
            if v == 0 {
                return Err(bad(k, "must be positive"));
            }
        }
        if !self.lookback.is_multiple_of(self.seg_len) {
            return Err(bad("seg_len", format!("lookback {} is not divisible by {}", self.lookback, self.seg_len)));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(bad("d_model", "must be even"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) {
            return Err(bad("lr", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(bad("decay_factor", "must be in (0, 1]"));
        }
        if self.decay_start > self.epochs {
            return Err(bad("decay_start", format!("{} exceeds epochs {}", self.decay_start, self.epochs)));
        }
        if self.grad_clip < 0.0 {
            return Err(bad("grad_clip", "must be non-negative"));
        }
        if self.use_mamba && self.d_state == 0 {
            return Err(bad("d_state", "must be positive"));
        }
        if self.strict_domains {
            if ![2, 4].contains(&self.d_state) {
                return Err(bad("d_state", format!("{} is not a published setting (2 or 4)", self.d_state)));
            }
            if ![12, 24].contains(&self.seg_len) {
                return Err(bad("seg_len", format!("{} is not a published setting (12 or 24)", self.seg_len)));
            }
        }
        if let Some(&l) = self.lookbacks.iter().find(|&&l| l == 0 || l % self.seg_len != 0) {
            return Err(bad("lookbacks", format!("{l} is not a positive multiple of seg_len {}", self.seg_len)));
        }
        Ok(())
    }

    pub fn split_convention(&self) -> Result<SplitConvention> {
        match self.split.as_str() {
            "ett_hour" => Ok(SplitConvention::EttHour),
            "ett_minute" => Ok(SplitConvention::EttMinute),
            "ratio" => Ok(SplitConvention::default()),
            other => Err(bad("split", format!("`{other}` is not one of ett_hour, ett_minute, ratio"))),
        }
    }

    fn norm_kind(&self) -> Result<NormKind> {
        match self.norm.as_str() {
            "last_value" => Ok(NormKind::LastValue),
            "mean_std" => Ok(NormKind::MeanStd),
            other => Err(bad("norm", format!("`{other}` is not one of last_value, mean_std"))),
        }
    }

    fn width(&self) -> Result<MambaWidth> {
        match self.mamba_width.as_str() {
            "channels" => Ok(MambaWidth::Channels),
            "per_channel" => Ok(MambaWidth::PerChannel),
            other => Err(bad("mamba_width", format!("`{other}` is not one of channels, per_channel"))),
        }
    }

    fn loss_kind(&self) -> Result<LossKind> {
        match self.loss.as_str() {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            other => Err(bad("loss", format!("`{other}` is not one of mse, mae"))),
        }
    }

    pub fn dump_split(&self) -> Result<ismrnn::data::Split> {
        use ismrnn::data::Split;
        match self.dump_split.as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(bad("dump_split", format!("`{other}` is not one of train, val, test"))),
        }
    }

    pub fn variant(&self) -> Variant {
        match (self.use_mamba, self.use_lr) {
            (true, true) => Variant::MambaLr,
            (false, true) => Variant::Lr,
            (true, false) => Variant::Mamba,
            (false, false) => Variant::Plain,
        }
    }

    pub fn model_config(&self, channels: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            channels,
            seg_len: self.seg_len,
            d_model: self.d_model,
            dropout: self.dropout,
            use_mamba: self.use_mamba,
            use_lr: self.use_lr,
            use_conv: self.use_conv,
            d_state: self.d_state,
            conv_kernel: self.conv_kernel,
            norm: self.norm_kind()?,
            per_segment_compress: self.per_segment_compress,
            mamba_width: self.width()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            decay_start: self.decay_start,
            decay_factor: self.decay_factor,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: self.loss_kind()?,
            patience: (self.patience > 0).then_some(self.patience),
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            shuffle: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
