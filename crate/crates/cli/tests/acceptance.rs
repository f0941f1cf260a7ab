//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line.
//!
//! The ETTh2 criteria read `$ISMRNN_DATA_DIR/ETTh2.csv` (default
//! `data/ETTh2.csv` at the workspace root). They take about an hour and a half
//! of single-core CPU and are `#[ignore]`d; run them with
//! `cargo test --release -p ismrnn-cli --test acceptance -- --ignored --nocapture`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use common::{model_gradient_errors, random_tensor, segrnn_reference, sine_dataset, tiny_config};
use ismrnn::data::{load_csv, prepare, CsvSchema, Prepared};
use ismrnn::eval::{evaluate, run_experiment, ExperimentReport};
use ismrnn::mamba::{ssm_scan, ScanDims, ScanInputs, ScanStrategy};
use ismrnn::model::{IsmrnnModel, ModelConfig, ParamStore, Variant};
use ismrnn::tensor::{Tape, Tensor};
use ismrnn::train::{fit, lr_at, TrainConfig};
use ismrnn_cli::{parse_config, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(criterion: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("{} {criterion}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{criterion}: {detail}");
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let model = IsmrnnModel::new(tiny_config(), 42).unwrap();
    let x = random_tensor(&[3, 8, 2], 1);
    let y = random_tensor(&[3, 4, 2], 2);
    let errors = model_gradient_errors(&model, &x, &y, 1e-5, 1e-6);
    let secs = start.elapsed().as_secs_f64();
    let (name, worst) = errors
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    verdict(
        "gradient correctness",
        worst < 1e-3 && secs < 60.0,
        format!("{} parameters, worst relative error {worst:.3e} ({name}), {secs:.1}s", errors.len()),
    );
}

fn naive_scan(dims: ScanDims, s: &ScanInputs) -> Vec<f64> {
    let ScanDims { batch, len, inner, state } = dims;
    let mut y = vec![0.0; batch * len * inner];
    for bi in 0..batch {
        for e in 0..inner {
            let mut h = vec![0.0; state];
            for t in 0..len {
                let i = (bi * len + t) * inner + e;
                let row = (bi * len + t) * state;
                let mut out = s.d_skip[e] * s.u[i];
                for (n, hn) in h.iter_mut().enumerate() {
                    let decay = (s.delta[i] * s.a[e * state + n]).exp();
                    *hn = decay * *hn + s.delta[i] * s.b[row + n] * s.u[i];
                    out += s.c[row + n] * *hn;
                }
                y[i] = out;
            }
        }
    }
    y
}

#[test]
fn scan_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dims = ScanDims {
            batch: rng.random_range(1..=2),
            len: rng.random_range(1..=32),
            inner: rng.random_range(1..=8),
            state: rng.random_range(1..=4),
        };
        let (bl, e, n) = (dims.batch * dims.len, dims.inner, dims.state);
        let mut draw = |k: usize, lo: f64, hi: f64| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (u, delta, a) = (draw(bl * e, -2.0, 2.0), draw(bl * e, 1e-3, 1.0), draw(e * n, -4.0, -0.05));
        let (b, c, d) = (draw(bl * n, -1.0, 1.0), draw(bl * n, -1.0, 1.0), draw(e, -1.0, 1.0));
        let inputs = ScanInputs {
            u: &u,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d_skip: &d,
        };
        let want = naive_scan(dims, &inputs);
        let scale = want.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
        for strategy in [ScanStrategy::Sequential, ScanStrategy::Associative] {
            let (got, _) = ssm_scan(dims, inputs, strategy).unwrap();
            let err = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(err);
        }
    }
    verdict("scan oracle", worst <= 1e-12, format!("100 instances, worst relative error {worst:.3e}"));
}

#[test]
fn baseline_equivalence() {
    let shapes = [(8, 4, 2, 4, 6, 3), (96, 96, 7, 24, 32, 4), (48, 30, 3, 12, 10, 5)];
    let mut worst = 0.0f64;
    let mut identical = true;
    for (i, &(l, h, c, w, d, b)) in shapes.iter().enumerate() {
        let cfg = ModelConfig::new(l, h, c, w, d).with_variant(Variant::Plain);
        let model = IsmrnnModel::new(cfg.clone(), 100 + i as u64).unwrap();
        let x = random_tensor(&[b, l, c], 200 + i as u64);
        let ours = model.predict(&x).unwrap();
        let reference = segrnn_reference(&model.params, &cfg, &x).unwrap();
        identical &= ours.shape() == reference.shape() && ours.data() == reference.data();
        worst = worst.max(ours.max_abs_diff(&reference));
    }
    verdict(
        "baseline equivalence",
        identical,
        format!("{} shapes, bitwise {identical}, max abs diff {worst:e}", shapes.len()),
    );
}

#[test]
fn structural_identities() {
    let cfg = tiny_config();
    let (n, d, l) = (cfg.n_segments(), cfg.d_model, cfg.lookback);

    // (a) unit expansion copies the input into every segment row.
    let mut model = IsmrnnModel::new(cfg.clone(), 1).unwrap();
    *model.params.get_mut("exp.w").unwrap() = Tensor::full([n], 1.0);
    *model.params.get_mut("exp.b").unwrap() = Tensor::zeros([n]);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let x = random_tensor(&[5, l], 2);
    let xv = tape.constant(x.clone());
    let (xbar, _) = model.implicit_segment(&mut tape, &p, xv).unwrap();
    let xbar = tape.value(xbar);
    let a = (0..5).all(|r| (0..n).all(|j| (0..l).all(|t| xbar.get(&[r, j, t]) == x.get(&[r, t]))));

    // (b) a zeroed residual leaves the final hidden state untouched.
    let mut model = IsmrnnModel::new(cfg.clone(), 3).unwrap();
    *model.params.get_mut("res.w").unwrap() = Tensor::zeros([d, l]);
    *model.params.get_mut("res.b").unwrap() = Tensor::zeros([d]);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let xv = tape.constant(random_tensor(&[4, l], 4));
    let (xbar, xt) = model.implicit_segment(&mut tape, &p, xv).unwrap();
    let h_n = model.gru_encode(&mut tape, &p, xt).unwrap();
    let res = model.residual_path(&mut tape, &p, xbar).unwrap();
    let h = tape.add(h_n, res).unwrap();
    let b = tape.value(h) == tape.value(h_n);

    // (c) an all-zero block passes the series through, with and without conv.
    let c = [false, true].into_iter().all(|use_conv| {
        let spec = ismrnn::mamba::SsmBlockSpec {
            d_model: 3,
            d_state: 2,
            use_conv,
            conv_kernel: 4,
        };
        let mut store = ParamStore::new();
        spec.init(&mut store, "m", &mut ChaCha8Rng::seed_from_u64(0));
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = random_tensor(&[2, 10, 3], 5);
        let xv = tape.constant(x.clone());
        let y = spec.forward(&mut tape, &p, "m", xv).unwrap();
        tape.value(y) == &x
    });
    verdict("structural identities", a && b && c, format!("(a) {a}, (b) {b}, (c) {c}"));
}

#[test]
fn overfit_smoke() {
    let ds = sine_dataset(64, 16, 8);
    let model = IsmrnnModel::new(ModelConfig::new(16, 8, 2, 4, 16), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 125,
        lr: 5e-3,
        decay_start: 125,
        batch_size: 16,
        seed: 1,
        max_steps: Some(500),
        ..TrainConfig::default()
    };
    let first = fit(&model, &ds, &ds, &cfg).unwrap();
    let second = fit(&model, &ds, &ds, &cfg).unwrap();
    let mse = evaluate(&first.model, &ds, 64).unwrap().mse;
    let deterministic = first.history == second.history && first.model == second.model;
    verdict(
        "overfit smoke",
        ds.len() == 64 && first.steps <= 500 && mse < 1e-2 && deterministic,
        format!("train MSE {mse:.3e} after {} steps, deterministic {deterministic}", first.steps),
    );
}

#[test]
fn lr_schedule() {
    let cfg = TrainConfig {
        epochs: 30,
        lr: 0.0003,
        decay_start: 15,
        ..TrainConfig::default()
    };
    let flat = (1..=15).all(|e| lr_at(e, &cfg) == 0.0003);
    let decays = (16..=30).all(|e| lr_at(e, &cfg) == lr_at(e - 1, &cfg) * 0.9);
    let e16 = lr_at(16, &cfg);
    verdict(
        "lr schedule",
        flat && decays && e16 == 0.00027,
        format!("constant through 15 {flat}, x0.9 per epoch {decays}, epoch 16 = {e16:?}"),
    );
}

fn synthetic_csv(dir: &Path) -> PathBuf {
    let path = dir.join("series.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "date,a,b,c").unwrap();
    for t in 0..400usize {
        let x = t as f64;
        let stamp = format!("2021-02-{:02} {:02}:00:00", 1 + t / 24, t % 24);
        writeln!(f, "{stamp},{},{},{}", (x * 0.3).sin(), (x * 0.07).cos() + 0.002 * x, (x * 0.5).sin() * 0.3).unwrap();
    }
    path
}

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path());
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "dataset = \"synthetic\"\ndata_path = \"{}\"\nlookback = 24\nhorizon = 12\nseg_len = 6\n\
             d_model = 16\nd_state = 2\nuse_conv = true\ndropout = 0.2\nepochs = 3\nlr = 0.003\n\
             batch_size = 16\nseed = 99\n",
            data.display()
        ),
    )
    .unwrap();
    let outs: Vec<PathBuf> = ["first", "second"].iter().map(|s| dir.path().join(s)).collect();
    for out in &outs {
        let status = Command::new(env!("CARGO_BIN_EXE_ismrnn"))
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    }
    let read = |name: &str| -> Vec<Vec<u8>> { outs.iter().map(|o| std::fs::read(o.join(name)).unwrap()).collect() };
    let (history, ckpt) = (read("history.csv"), read("model.ckpt"));
    let same_history = history[0] == history[1];
    let same_ckpt = ckpt[0] == ckpt[1];
    verdict(
        "determinism",
        same_history && same_ckpt,
        format!("history.csv identical {same_history}, model.ckpt identical {same_ckpt} ({} bytes)", ckpt[0].len()),
    );
}

// ETTh2 criteria.

const SEEDS: [u64; 3] = [2024, 2025, 2026];
const DESK_MINUTES: f64 = 45.0;

fn etth2_path() -> PathBuf {
    std::env::var_os("ISMRNN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap().join("data"))
        .join("ETTh2.csv")
}

/// The ETTh2 H=96 preset with the overrides in `extra`.
fn etth2_config(extra: &[(&str, toml::Value)]) -> RunConfig {
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets/etth2_96.toml");
    let mut overrides = vec![("data_path".to_string(), toml::Value::String(etth2_path().display().to_string()))];
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    parse_config(Some(&preset), &overrides).unwrap()
}

fn desk_config() -> RunConfig {
    etth2_config(&[("d_model", toml::Value::Integer(128)), ("epochs", toml::Value::Integer(10))])
}

fn load_etth2() -> Result<Prepared, String> {
    let path = etth2_path();
    if !path.is_file() {
        return Err(format!("ETTh2 CSV not found at {}", path.display()));
    }
    let cfg = desk_config();
    let raw = load_csv(&path, &CsvSchema::default()).map_err(|e| e.to_string())?;
    prepare(&raw, &cfg.dataset, cfg.split_convention().unwrap(), cfg.lookback, cfg.horizon).map_err(|e| e.to_string())
}

struct DeskRuns {
    /// `[seed][variant]` in `Variant::ALL` order, use_conv off.
    ablation: Vec<Vec<ExperimentReport>>,
    /// M&LR with use_conv on, first seed.
    with_conv: ExperimentReport,
}

/// Every reduced-budget run, trained once and shared across criteria.
fn desk_runs() -> &'static Result<DeskRuns, String> {
    static RUNS: OnceLock<Result<DeskRuns, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let data = load_etth2()?;
        let cfg = desk_config();
        let base = cfg.model_config(data.series.channels()).map_err(|e| e.to_string())?;
        let train = cfg.train_config().map_err(|e| e.to_string())?;
        let run = |model: &ModelConfig, seed: u64| -> Result<ExperimentReport, String> {
            let (report, _) =
                run_experiment(&data, model, &TrainConfig { seed, ..train.clone() }).map_err(|e| e.to_string())?;
            println!("  {} seed {seed} use_conv {}: test mse {:.6}", report.variant, report.use_conv, report.mse);
            Ok(report)
        };
        let ablation = SEEDS
            .iter()
            .map(|&seed| Variant::ALL.iter().map(|&v| run(&base.clone().with_variant(v), seed)).collect())
            .collect::<Result<Vec<Vec<_>>, _>>()?;
        let conv = ModelConfig {
            use_conv: true,
            ..base.with_variant(Variant::MambaLr)
        };
        let with_conv = run(&conv, SEEDS[0])?;
        Ok(DeskRuns { ablation, with_conv })
    })
}

fn desk_or_fail(criterion: &str) -> &'static DeskRuns {
    match desk_runs() {
        Ok(runs) => runs,
        Err(e) => {
            verdict(criterion, false, e);
            unreachable!()
        }
    }
}

fn train_minutes(r: &ExperimentReport) -> f64 {
    r.epoch_seconds.iter().sum::<f64>() / 60.0
}

#[test]
#[ignore = "needs the ETTh2 CSV and about an hour of CPU"]
fn desk_scale_reproduction() {
    let runs = desk_or_fail("desk-scale reproduction");
    let first = &runs.ablation[0];
    let (full, plain) = (&first[0], &first[3]);
    let minutes = train_minutes(full) + train_minutes(plain);
    verdict(
        "desk-scale reproduction",
        full.mse <= plain.mse && minutes < DESK_MINUTES,
        format!("M&LR {:.6} vs none {:.6}, {minutes:.1} min for both", full.mse, plain.mse),
    );
}

#[test]
#[ignore = "needs the ETTh2 CSV and about an hour of CPU"]
fn ablation_ordering() {
    let runs = desk_or_fail("ablation ordering");
    let means: Vec<f64> = (0..4)
        .map(|v| runs.ablation.iter().map(|seed| seed[v].mse).sum::<f64>() / SEEDS.len() as f64)
        .collect();
    let best = means[0] < means[1] && means[0] < means[2] && means[0] < means[3];
    let worst = means[2] > means[0] && means[2] > means[1] && means[2] > means[3];
    verdict(
        "ablation ordering",
        best && worst,
        format!(
            "mean test MSE over {} seeds: M&LR {:.6}, LR {:.6}, M {:.6}, none {:.6}",
            SEEDS.len(),
            means[0],
            means[1],
            means[2],
            means[3]
        ),
    );
}

#[test]
#[ignore = "needs the ETTh2 CSV and about an hour of CPU"]
fn conv_ablation_direction() {
    let runs = desk_or_fail("conv ablation direction");
    let (off, on) = (runs.ablation[0][0].mse, runs.with_conv.mse);
    verdict(
        "conv ablation direction",
        off <= on,
        format!("use_conv=false {off:.6} vs use_conv=true {on:.6}"),
    );
}

#[test]
#[ignore = "needs the ETTh2 CSV and many hours of CPU"]
fn full_scale_reproduction() {
    let data = load_etth2().unwrap_or_else(|e| {
        verdict("full-scale reproduction", false, e);
        unreachable!()
    });
    let cfg = etth2_config(&[]);
    let model = cfg.model_config(data.series.channels()).unwrap();
    let (report, _) = run_experiment(&data, &model, &cfg.train_config().unwrap()).unwrap();
    verdict(
        "full-scale reproduction",
        (report.mse - 0.275).abs() <= 0.02,
        format!("test MSE {:.6}, target 0.275 +/- 0.02", report.mse),
    );
}

/// Reports the ETTh2 criteria in the default run, where they are not executed.
#[test]
fn etth2_criteria_status() {
    let path = etth2_path();
    let found = path.is_file();
    for criterion in ["desk-scale reproduction", "ablation ordering", "conv ablation direction", "full-scale reproduction"] {
        if found {
            println!("SKIP {criterion}: runs under --ignored");
        } else {
            println!("FAIL {criterion}: ETTh2 CSV not found at {}", path.display());
        }
    }
}
