mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kdfusion::dataset::Split;

use crate::commands::EvaluateArgs;
use crate::config::{Overrides, CONFIG_ENV};
use crate::error::CliError;

/// Cross-modal distillation and shifting fusion on synthetic conversations.
#[derive(Debug, Parser)]
#[command(name = "kdfusion", version)]
struct Cli {
    /// TOML run config; built-in defaults when absent.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Overrides both the training and the data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `paths.output_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads for `ablate`.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Dotted-path override, e.g. `--set train.batch_size=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Accept checkpoints whose config hash differs from the active config.
    #[arg(long, global = true)]
    allow_config_mismatch: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic feature file.
    GenData {
        /// Destination; defaults to `paths.data_file`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the teacher encoder with cross entropy.
    TrainTeacher,
    /// Train the student encoders against the saved teacher.
    Distill,
    /// Train the fusion head over the saved encoders.
    TrainFusion,
    /// Score teacher, students and fusion on one split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
        /// Score freshly initialized models instead of checkpoints.
        #[arg(long)]
        untrained: bool,
    },
    /// Run the ablation grid.
    Ablate {
        /// TOML grid spec; the default grid when absent.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Print the resolved config as TOML.
    ShowConfig,
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// cross_entropy, response_loss, feature_loss, fused or all.
        loss: String,
        /// Number of seeded inputs.
        #[arg(default_value_t = 20)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load(&Overrides {
        config: cli.config,
        sets: cli.sets,
        seed: cli.seed,
        out_dir: cli.out_dir,
    })?;
    match cli.command {
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::GenData { out } => commands::gen_data(&cfg, out),
        Command::TrainTeacher => commands::train_teacher_cmd(&cfg),
        Command::Distill => commands::distill(&cfg, cli.allow_config_mismatch),
        Command::TrainFusion => commands::train_fusion_cmd(&cfg, cli.allow_config_mismatch),
        Command::Evaluate { split, untrained } => commands::evaluate(
            &cfg,
            &EvaluateArgs {
                split,
                untrained,
                allow_config_mismatch: cli.allow_config_mismatch,
            },
        ),
        Command::Ablate { grid } => commands::ablate(&cfg, grid.as_deref(), cli.threads),
        Command::Gradcheck { loss, seeds } => commands::gradcheck(&cfg, &loss, seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
