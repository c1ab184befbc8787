mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, EXIT_CONFIG};

/// Lightweight CT lesion segmentation.
///
/// Exit codes: 0 success, 1 configuration or usage error, 2 data error,
/// 3 non-finite loss, 4 checkpoint does not match the model, 5 gradient
/// check failure.
#[derive(Parser)]
#[command(name = "liteseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, logs and the resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of volume-<id>.nii / segmentation-<id>.nii pairs, or phantoms:NxS.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment every slice of a volume into 0/255 graymaps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// A NIfTI volume, or phantoms:NxS.
        #[arg(long)]
        input: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on labelled data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: String,
        #[arg(long)]
        csv: bool,
    },
    /// Print the per-layer parameter table, or compare both variants.
    Params {
        #[arg(long, default_value = "proposed")]
        variant: String,
        #[arg(long, default_value_t = 64)]
        base_depth: usize,
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference gradient checks: layers, block, model or all.
    Gradcheck {
        #[arg(default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, data, out } => commands::train_cmd(config.as_deref(), &data, &out),
        Command::Infer {
            checkpoint,
            config,
            input,
            out,
        } => commands::infer_cmd(&checkpoint, config.as_deref(), &input, &out),
        Command::Eval {
            checkpoint,
            config,
            data,
            csv,
        } => commands::eval_cmd(&checkpoint, config.as_deref(), &data, csv),
        Command::Params {
            variant,
            base_depth,
            compare,
            csv,
        } => commands::params_cmd(&variant, base_depth, compare, csv),
        Command::Gradcheck {
            scope,
            instances,
            seed,
            corrupt_op,
        } => commands::gradcheck_cmd(&scope, instances, seed, corrupt_op.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
