//! One function per subcommand; each writes its artifacts under `out_dir`.

use std::path::{Path, PathBuf};

use ismrnn::checkpoint::{load_checkpoint_as, save_checkpoint};
use ismrnn::data::{load_csv, prepare, CsvSchema, Prepared, RawSeries};
use ismrnn::eval::{
    dump_predictions, evaluate, lookback_sweep, profile, run_ablation, run_experiment, write_aggregate_csv, ExperimentReport,
};
use ismrnn::model::{IsmrnnModel, Variant};
use ismrnn::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Ablate,
    Sweep,
    Profile,
    Dump,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
            Command::Profile => "profile",
            Command::Dump => "dump",
        }
    }
}

/// Runs `cmd` and returns a one-line summary.
pub fn execute(cmd: Command, cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?;
    match cmd {
        Command::Train => train(cfg, &out),
        Command::Eval => eval(cfg, &out),
        Command::Ablate => ablate(cfg, &out),
        Command::Sweep => sweep(cfg, &out),
        Command::Profile => run_profile(cfg, &out),
        Command::Dump => dump(cfg, &out),
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(cfg.out_dir.clone())
}

fn load_raw(cfg: &RunConfig) -> Result<RawSeries> {
    let path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| Error::Config("key `data_path` is required for this command".into()))?;
    load_csv(path, &CsvSchema::default())
}

fn load_data(cfg: &RunConfig) -> Result<Prepared> {
    let raw = load_raw(cfg)?;
    prepare(&raw, &cfg.dataset, cfg.split_convention()?, cfg.lookback, cfg.horizon)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn tag_file(v: &str) -> &'static str {
    match Variant::from_tag(v) {
        Some(Variant::MambaLr) => "m_lr",
        Some(Variant::Lr) => "lr",
        Some(Variant::Mamba) => "m",
        _ => "none",
    }
}

fn summary(r: &ExperimentReport) -> String {
    format!("{} H={} L={} {}: mse {:.6} mae {:.6}", r.dataset, r.horizon, r.lookback, r.variant, r.mse, r.mae)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = load_data(cfg)?;
    let model_cfg = cfg.model_config(data.series.channels())?;
    let (report, outcome) = run_experiment(&data, &model_cfg, &cfg.train_config()?)?;
    save_checkpoint(
        out.join(CHECKPOINT_FILE),
        &outcome.model,
        Some(&outcome.state.adam),
        outcome.state.epoch as u64,
    )?;
    outcome.history.write_csv(out.join(HISTORY_FILE))?;
    report.write_json(out.join(REPORT_FILE))?;
    Ok(summary(&report))
}

#[derive(Debug, Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    val_mse: f64,
    val_mae: f64,
    test_mse: f64,
    test_mae: f64,
}

fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

fn load_model(cfg: &RunConfig, out: &Path, channels: usize) -> Result<IsmrnnModel> {
    load_checkpoint_as(checkpoint_path(cfg, out), &cfg.model_config(channels)?)
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, out, data.series.channels())?;
    let val = evaluate(&model, &data.val, cfg.batch_size)?;
    let test = evaluate(&model, &data.test, cfg.batch_size)?;
    let report = EvalReport {
        checkpoint: checkpoint_path(cfg, out),
        val_mse: val.mse,
        val_mae: val.mae,
        test_mse: test.mse,
        test_mae: test.mae,
    };
    write_json(&out.join("eval.json"), &report)?;
    Ok(format!("val mse {:.6} mae {:.6}; test mse {:.6} mae {:.6}", val.mse, val.mae, test.mse, test.mae))
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = load_data(cfg)?;
    let base = cfg.model_config(data.series.channels())?;
    let runs = run_ablation(&data, &base, &cfg.train_config()?)?;
    let reports: Vec<ExperimentReport> = runs.into_iter().map(|(r, _)| r).collect();
    for r in &reports {
        r.write_json(out.join(format!("report_{}.json", tag_file(&r.variant))))?;
    }
    write_aggregate_csv(&reports, out.join(AGGREGATE_FILE))?;
    Ok(reports.iter().map(summary).collect::<Vec<_>>().join("\n"))
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<String> {
    let raw = load_raw(cfg)?;
    let base = cfg.model_config(raw.channels())?;
    let reports = lookback_sweep(&raw, &cfg.dataset, cfg.split_convention()?, &base, &cfg.lookbacks, &cfg.train_config()?)?;
    for r in &reports {
        r.write_json(out.join(format!("report_L{}_{}.json", r.lookback, tag_file(&r.variant))))?;
    }
    write_aggregate_csv(&reports, out.join(AGGREGATE_FILE))?;
    Ok(reports.iter().map(summary).collect::<Vec<_>>().join("\n"))
}

fn run_profile(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = load_data(cfg)?;
    let model = IsmrnnModel::new(cfg.model_config(data.series.channels())?, cfg.seed)?;
    let p = profile(&model, &data.train, cfg.profile_batch, &cfg.train_config()?)?;
    write_json(&out.join("profile.json"), &p)?;
    Ok(format!(
        "{} steps in {:.3}s, {} parameters, peak tape {} bytes, peak rss {}",
        p.steps,
        p.epoch_seconds,
        p.param_count,
        p.peak_tape_bytes,
        p.peak_rss_bytes.map_or("n/a".to_string(), |b| format!("{b} bytes"))
    ))
}

fn dump(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, out, data.series.channels())?;
    let path = out.join("predictions.csv");
    dump_predictions(&model, data.dataset(cfg.dump_split()?), &cfg.dump_windows, &path)?;
    Ok(format!("{} windows written to {}", cfg.dump_windows.len(), path.display()))
}
