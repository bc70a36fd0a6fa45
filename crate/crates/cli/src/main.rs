use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use c2mf::training::Regime;
use c2mf::FusionMethod;
use c2mf_cli::{run, CliError, Command, Overrides, RunConfig};
use clap::{Parser, Subcommand};

/// Credibility-aware multimodal fusion experiments.
#[derive(Debug, Parser)]
#[command(name = "c2mf", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for data, corruption and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<FusionMethod>,
    #[arg(long, global = true, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// Test-time conflict level; repeat for a grid.
    #[arg(long = "lambda-test", global = true)]
    lambda_test: Vec<f64>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate and corrupt a synthetic dataset.
    GenData,
    /// Train one fusion method and write a checkpoint.
    Train,
    /// Evaluate a checkpoint on every split.
    Eval,
    /// Evaluate a checkpoint across the test conflict grid.
    Sweep,
    /// Compare gradients with finite differences.
    GradCheck,
}

fn parse_method(s: &str) -> Result<FusionMethod, String> {
    s.parse::<FusionMethod>().map_err(|e| e.to_string())
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse()
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let command = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Sweep => Command::Sweep,
        Cmd::GradCheck => Command::GradCheck,
    };
    let path = cli
        .config
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        data: cli.data,
        checkpoint: cli.checkpoint,
        method: cli.method,
        regime: cli.regime,
        lambda_test: cli.lambda_test,
    };
    let cfg = RunConfig::load(&path)?.resolve(&overrides)?;
    let outcome = run(command, &cfg).with_context(|| command.name())?;
    println!("{}", outcome.message);
    for p in outcome.written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<CliError>().map_or(2, CliError::exit_code);
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(code)
        }
    }
}
