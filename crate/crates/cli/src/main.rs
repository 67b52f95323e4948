use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use colt_cli::commands::{
    cmd_compare, cmd_eval_checkpoint, cmd_eval_records, cmd_gen, cmd_report, cmd_train, CliError, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "colt",
    version,
    about = "Continual object detection over a stream of driving domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic task stream to a dataset directory
    Gen {
        /// Stream config, or an experiment config with a [dataset.stream] table
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the stream seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Train every task of the stream in order, once per configured seed
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output_dir` from the config
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Continue unfinished runs from their latest checkpoint
        #[arg(long)]
        resume: bool,
        /// Force deterministic mode on or off
        #[arg(long, env = colt_cli::DETERMINISTIC_ENV, value_parser = clap::builder::BoolishValueParser::new())]
        deterministic: Option<bool>,
    },
    /// Score a checkpoint on its test splits, or score record files
    #[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "predictions"])))]
    Eval {
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory the checkpoint was trained on
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where predictions.jsonl and ground_truth.jsonl go
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[arg(long, requires = "ground_truth", conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Ablation table and plots over two or more runs or seed sweeps
    Compare {
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
    /// Per-task and per-class table plus the performance matrix of one run
    Report {
        run: PathBuf,
        /// Defaults to the run directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            force,
        } => cmd_gen(&config, &out, seed, force),
        Command::Train {
            config,
            out,
            force,
            resume,
            deterministic,
        } => cmd_train(TrainArgs {
            config: &config,
            out: out.as_deref(),
            force,
            resume,
            deterministic,
        })
        .map(|_| ()),
        Command::Eval {
            checkpoint,
            data,
            out,
            predictions,
            ground_truth,
            iou,
        } => {
            let text = match (checkpoint, data, predictions, ground_truth) {
                (Some(c), Some(d), None, _) => cmd_eval_checkpoint(&c, &d, &out, iou)?,
                (None, _, Some(p), Some(g)) => cmd_eval_records(&p, &g, iou)?,
                _ => {
                    return Err(CliError::Usage(
                        "pass --checkpoint with --data, or --predictions with --ground-truth".into(),
                    ))
                }
            };
            print!("{text}");
            Ok(())
        }
        Command::Compare { runs, out } => {
            print!("{}", cmd_compare(&runs, &out)?);
            Ok(())
        }
        Command::Report { run, out } => {
            print!("{}", cmd_report(&run, out.as_deref())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
