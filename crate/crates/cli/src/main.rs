use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ismrnn_cli::{execute, exit_code, parse_config, parse_override, Command};

#[derive(Parser)]
#[command(name = "ismrnn", version, about = "Segment-wise recurrent forecaster: train, evaluate, ablate, profile")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and score it on the test split.
    Train(Common),
    /// Score a saved checkpoint on the validation and test splits.
    Eval(Common),
    /// Train and score the four structural variants.
    Ablate(Common),
    /// Full model vs plain variant over a list of lookbacks.
    Sweep(Common),
    /// Time one training epoch and record peak memory.
    Profile(Common),
    /// Write per-window ground truth and predictions as CSV.
    Dump(Common),
}

#[derive(Args)]
struct Common {
    /// Flat key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated. Overrides win over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as `--set out_dir=...`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
        Cmd::Profile(a) => (Command::Profile, a),
        Cmd::Dump(a) => (Command::Dump, a),
    };
    let result = (|| {
        let mut overrides = args.set.iter().map(|s| parse_override(s)).collect::<ismrnn::Result<Vec<_>>>()?;
        if let Some(out) = &args.out {
            overrides.push(("out_dir".into(), toml::Value::String(out.display().to_string())));
        }
        let cfg = parse_config(args.config.as_deref(), &overrides)?;
        execute(cmd, &cfg)
    })();
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ismrnn {}: {:?} error: {e}", cmd.name(), e.kind());
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
