use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use compprof::pipeline::{self, ExperimentConfig};
use compprof::{Error, Result};

/// Per-class neuron activation profiles and likelihood distances on Fashion-MNIST.
#[derive(Parser, Debug)]
#[command(name = "compprof", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stratified 6000/1000 subset and 3 epochs.
    #[arg(long, global = true)]
    quick: bool,
    /// Histogram bin width multiplier.
    #[arg(long, global = true, value_name = "VALUE")]
    c: Option<f64>,
    /// Rotation ladder step in degrees.
    #[arg(long, global = true, value_name = "DEG")]
    rotation_step: Option<f64>,
    /// Largest rotation tried, in degrees.
    #[arg(long, global = true, value_name = "DEG")]
    rotation_max: Option<f64>,
    /// Spread computed as sqrt(sum of squares) / n.
    #[arg(long, global = true)]
    paper_literal_std: bool,
    /// Bin probabilities normalized by each class's own sample count.
    #[arg(long, global = true)]
    per_class_norm: bool,
    /// Any other configuration key, as KEY=VALUE.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the network and write the checkpoint and training log.
    Train,
    /// Fit per-class activation profiles from the trained network.
    Fit,
    /// Generate the random-pixel set and the rotation set.
    Derive,
    /// Score train, test, random and rotation inputs.
    Score,
    /// Write summary tables, comparison tables, plots and the manifest.
    Report,
    /// Run every stage in order.
    Full,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.quick {
        cfg.quick = true;
    }
    if let Some(c) = cli.c {
        cfg.c = c;
    }
    if let Some(s) = cli.rotation_step {
        cfg.rotation_step = s;
    }
    if let Some(m) = cli.rotation_max {
        cfg.rotation_max = m;
    }
    if cli.paper_literal_std {
        cfg.set("paper_literal_std", "true")?;
    }
    if cli.per_class_norm {
        cfg.set("per_class_norm", "true")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Train => pipeline::cmd_train(&cfg).map(drop),
        Command::Fit => pipeline::cmd_fit(&cfg).map(drop),
        Command::Derive => pipeline::cmd_derive(&cfg).map(drop),
        Command::Score => pipeline::cmd_score(&cfg).map(drop),
        Command::Report => pipeline::cmd_report(&cfg).map(drop),
        Command::Full => pipeline::cmd_full(&cfg).map(|o| println!("finished in {:.1} s", o.elapsed_s)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
