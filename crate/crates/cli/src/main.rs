use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use probmix_core::error::Error;
use probmix_core::experiment::{self, ExperimentConfig};

const CONFIG_ERROR: u8 = 1;
const RUNTIME_FAILURE: u8 = 2;
const SELFTEST_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "probmix", version, about = "Probabilistic mixup experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets of every configured seed.
    Generate(Common),
    /// Train the configured method for every seed.
    Train(Common),
    /// Train the grid of methods and hyperparameters for every seed.
    Sweep(Common),
    /// Re-evaluate saved checkpoints.
    Eval(Common),
    /// Write density bands or class-probability grids from checkpoints.
    ExportPlots(Common),
    /// Run the built-in golden and property checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set regularizer.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(match e {
        Error::Config(_) => CONFIG_ERROR,
        _ => RUNTIME_FAILURE,
    })
}

fn load(args: &Common) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(&args.config, &args.overrides)
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Generate(a) => list(&experiment::run_generate(&load(&a)?, &a.out)?),
        Command::Train(a) => {
            let records = experiment::run_train(&load(&a)?, &a.out)?;
            println!("{} records written to {}", records.len(), a.out.join(experiment::RESULTS_FILE).display());
        }
        Command::Sweep(a) => {
            let report = experiment::run_sweep(&load(&a)?, &a.out)?;
            println!(
                "{} runs completed, {} skipped, {} failed",
                report.completed,
                report.skipped,
                report.failed.len()
            );
            for (id, msg) in &report.failed {
                eprintln!("failed: {id}: {msg}");
            }
        }
        Command::Eval(a) => {
            let records = experiment::run_eval(&load(&a)?, &a.out)?;
            println!("{} records written to {}", records.len(), a.out.join("eval.csv").display());
        }
        Command::ExportPlots(a) => list(&experiment::run_export_plots(&load(&a)?, &a.out)?),
        Command::Selftest(a) => {
            if let Some(config) = &a.config {
                ExperimentConfig::load(config, &a.overrides)?;
            }
            let checks = experiment::selftest();
            let mut lines = Vec::new();
            for c in &checks {
                lines.push(format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
            }
            println!("{}", lines.join("\n"));
            if let Some(out) = &a.out {
                write_report(out, &lines)?;
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::from(SELFTEST_FAILURE));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_report(out: &Path, lines: &[String]) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("selftest.txt"), lines.join("\n") + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    run(cli.command).unwrap_or_else(fail)
}
