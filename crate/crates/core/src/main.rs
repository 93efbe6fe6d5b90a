//! Experiment CLI.
//!
//! Exit codes: 0 success, 1 config error, 2 missing artifact, 3 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use predbn::harness::Harness;

#[derive(Parser)]
#[command(
    name = "predbn",
    version,
    about = "Train small normalized networks and evaluate them under covariate shift \
             with swappable batch-norm statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for grid cells (0 = one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Recompute even when outputs are up to date for this config.
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train all checkpoints the method list needs.
    Train(CommonArgs),
    /// Evaluate the method × shift × severity × batch-size × seed grid.
    Eval(CommonArgs),
    /// Activation-distribution discrepancies, eigenspectra, and histograms.
    Diagnose(CommonArgs),
    /// ε grid on the unshifted test set.
    SweepEps(CommonArgs),
    /// Summary tables grouped by severity (median/quartiles/min/max).
    Report(CommonArgs),
}

fn run(args: &CommonArgs, go: impl FnOnce(&Harness) -> predbn::Result<String>) -> ExitCode {
    let harness = match Harness::from_config_path(
        &args.config,
        args.out.clone(),
        args.seed,
        args.workers,
        args.force,
    ) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match go(&harness) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => run(args, |h| {
            let paths = h.cmd_train()?;
            Ok(format!("trained {} checkpoint(s) under {}", paths.len(), h.out.display()))
        }),
        Command::Eval(args) => run(args, |h| {
            let records = h.cmd_eval()?;
            Ok(format!("{} evaluation record(s) → {}", records.len(), h.out.display()))
        }),
        Command::Diagnose(args) => run(args, |h| {
            let rows = h.cmd_diagnose()?;
            Ok(format!("{} diagnostic row(s) → {}", rows.len(), h.out.display()))
        }),
        Command::SweepEps(args) => run(args, |h| {
            let rows = h.cmd_sweep_eps()?;
            Ok(format!("{} ε-sweep row(s) → {}", rows.len(), h.out.display()))
        }),
        Command::Report(args) => run(args, |h| {
            let rows = h.cmd_report()?;
            Ok(format!("{} summary row(s) → {}", rows.len(), h.out.join("report").display()))
        }),
    }
}
