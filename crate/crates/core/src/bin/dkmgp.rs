use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dkmgp::cli::{cmd_bench, cmd_dataset, cmd_eval, cmd_predict, cmd_simulate, cmd_train};
use dkmgp::config::RunConfig;
use dkmgp::predictor::HorizonPolicy;
use dkmgp::Result;

/// Residual-corrected vehicle state prediction pipeline.
///
/// Log verbosity follows the DKMGP_LOG environment variable
/// (error, warn, info, debug, trace; default info).
#[derive(Debug, Parser)]
#[command(name = "dkmgp", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; overrides `seed` from the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory; overrides `out` from the config (default ./out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the ground-truth log from the single-track model.
    Simulate,
    /// Build train/test residual datasets for every configured horizon.
    Dataset,
    /// Train one model per configured horizon and write checkpoints.
    Train,
    /// Roll out corrected predictions from every evaluation anchor.
    Predict {
        /// Correction policy: `fixed:<n>` or `ach`.
        #[arg(long, value_name = "POLICY", value_parser = parse_policy)]
        policy: HorizonPolicy,
    },
    /// Score all written traces and the uncorrected model against the log.
    Eval,
    /// Measure inference rates of every trained horizon and the baseline.
    Bench,
}

fn parse_policy(s: &str) -> std::result::Result<HorizonPolicy, String> {
    HorizonPolicy::parse(s).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg).map(|_| ()),
        Command::Dataset => cmd_dataset(&cfg).map(|_| ()),
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Predict { policy } => cmd_predict(&cfg, *policy).map(|_| ()),
        Command::Eval => cmd_eval(&cfg).map(|_| ()),
        Command::Bench => cmd_bench(&cfg).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DKMGP_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error kind={} message=\"{}\"",
                e.kind(),
                e.to_string()
                    .split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
                    .replace('"', "'")
            );
            ExitCode::FAILURE
        }
    }
}
