use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hotswap_cli::commands::{self, Overrides, SweepAxis};
use hotswap_cli::CliError;

#[derive(Parser)]
#[command(name = "hotswap", version, about = "Compatible embedding training and hot-refresh upgrade simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list; overrides `seeds`.
    #[arg(long)]
    seeds: Option<String>,
    /// Backfill strategy; overrides `strategy`.
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and allocate the synthetic data, write feature files.
    GenData(Common),
    /// Train old and new models, write checkpoints and training logs.
    Train(Common),
    /// Evaluate saved checkpoints at the whole-gallery endpoints.
    Eval(Common),
    /// Full pipeline: data, training, backfill trajectory, artifacts.
    #[command(alias = "run")]
    Simulate(Common),
    /// One sub-run per value of a single hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// tau, lambda, eta, batch_size, strategy or variant.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Finite-difference check of every loss variant's gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_gradient_fault: bool,
    },
}

fn load(c: &Common) -> Result<hotswap_cli::ExperimentConfig, CliError> {
    let seeds = c.seeds.as_deref().map(commands::parse_seeds).transpose()?;
    let ov = Overrides {
        out: c.out.clone(),
        seeds,
        strategy: c.strategy.clone(),
    };
    commands::load_config(&c.config, &ov)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => commands::cmd_gen_data(&load(&c)?),
        Command::Train(c) => commands::cmd_train(&load(&c)?),
        Command::Eval(c) => commands::cmd_eval(&load(&c)?),
        Command::Simulate(c) => commands::cmd_run(&load(&c)?),
        Command::Sweep { common, axis, values } => {
            let axis = SweepAxis::from_name(&axis).ok_or_else(|| CliError::Config(format!("axis: unknown axis {axis:?}")))?;
            let values: Vec<String> = values.into_iter().filter(|v| !v.trim().is_empty()).collect();
            commands::cmd_sweep(&load(&common)?, axis, &values)
        }
        Command::GradCheck {
            common,
            inject_gradient_fault,
        } => commands::cmd_grad_check(&load(&common)?, inject_gradient_fault),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hotswap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
