//! `w2sd` command line: training, evaluation and verification runs plus
//! the run-comparison table.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use w2sd_core::config::{RunConfig, RunMode};
use w2sd_core::runner;

#[derive(Parser)]
#[command(
    name = "w2sd",
    about = "Weak-to-strong few-step distillation of flow-matching models on synthetic data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining of the teacher backbone.
    Pretrain(RunArgs),
    /// Weak-to-strong distillation of a few-step generator.
    #[command(name = "distill-w2svd")]
    DistillW2svd(RunArgs),
    /// Vanilla DMD baseline (alpha_weak forced to 0, regularizer off).
    #[command(name = "distill-vanilla-dmd")]
    DistillVanillaDmd(RunArgs),
    /// 1-step generator training with the online pair curriculum.
    #[command(name = "train-1step")]
    Train1step(RunArgs),
    /// Metric report for a checkpoint.
    Eval(RunArgs),
    /// Numerical verification of the weak-to-strong scale law.
    #[command(name = "verify-prop1")]
    VerifyProp1(RunArgs),
    /// Finite-difference audit of every loss gradient.
    Gradcheck(RunArgs),
    /// Align metrics CSVs from several runs into one table.
    Compare {
        /// Metrics CSV files to compare (the first is the reference).
        csvs: Vec<PathBuf>,
        /// Directory for comparison.csv / comparison.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_mode(mode: RunMode, args: &RunArgs) -> w2sd_core::Result<()> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        w2sd_core::Error::config("config", format!("cannot read {}: {e}", args.config.display()))
    })?;
    let mut cfg = RunConfig::parse(&text)?;
    cfg.override_and_validate(
        Some(mode),
        args.seed,
        args.out.as_ref().map(|p| p.to_string_lossy().into_owned()),
    )?;
    let outcome = runner::run(&cfg)?;
    for m in &outcome.messages {
        println!("{m}");
    }
    println!("artifacts: {}", outcome.out_dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> w2sd_core::Result<()> {
    match &cli.command {
        Command::Pretrain(a) => run_mode(RunMode::Pretrain, a),
        Command::DistillW2svd(a) => run_mode(RunMode::DistillW2svd, a),
        Command::DistillVanillaDmd(a) => run_mode(RunMode::DistillVanillaDmd, a),
        Command::Train1step(a) => run_mode(RunMode::Train1Step, a),
        Command::Eval(a) => run_mode(RunMode::Eval, a),
        Command::VerifyProp1(a) => run_mode(RunMode::VerifyProp1, a),
        Command::Gradcheck(a) => run_mode(RunMode::Gradcheck, a),
        Command::Compare { csvs, out } => {
            let cmp = runner::compare_runs_files(csvs, out.as_deref())?;
            print!("{}", cmp.table);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
