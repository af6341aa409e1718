//! `attnbench`: latency, parameter and pruning experiments on CPU attention stacks.
//!
//! Exit status: 0 on success, 1 when `verify` finds a failing check or a run
//! fails, 2 on configuration errors.

mod commands;
mod config;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use attnbench::pruning::DEFAULT_TEMPERATURE;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::VerifyFailed;
use crate::config::ConfigError;

#[derive(Parser)]
#[command(
    name = "attnbench",
    version,
    about = "Attention map reuse and head pruning benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// conformer-m or allattention-lm.
    #[arg(long)]
    preset: Option<String>,
    /// key = value or JSON model file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the weight seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TimingArgs {
    /// `a,b,c` or `a..b` (a, 2a, ..., b).
    #[arg(long, default_value = "128..1024")]
    lengths: String,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct PruneArgs {
    /// Comma-separated sparsity coefficients, one training run each.
    #[arg(long, default_value = "0.01,0.015,0.02")]
    lambda: String,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 5.0)]
    lr: f64,
    /// BinConcrete temperature.
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    beta: f64,
    /// Sequence length of the distillation batch.
    #[arg(long, default_value_t = 16)]
    length: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Whole-stack latency per sequence length.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_name = "AxB")]
        reuse: Option<String>,
        #[command(flatten)]
        timing: TimingArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Per-submodule latency per sequence length.
    Breakdown {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_name = "AxB")]
        reuse: Option<String>,
        #[command(flatten)]
        timing: TimingArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Parameter counts per submodule.
    Params {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_name = "AxB")]
        reuse: Option<String>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Latency grid over reuse schedules and lengths.
    Reuse {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated `AxB` list; defaults to 1xL, 2x(L/2), 4x(L/4), 8x(L/8).
        #[arg(long)]
        schedules: Option<String>,
        #[command(flatten)]
        timing: TimingArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Gate training and head pruning.
    Prune {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        args: PruneArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Equivalence and property checks.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<VerifyFailed>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<attnbench::Error>() {
            return match e {
                attnbench::Error::Config(_) | attnbench::Error::Domain(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bench {
            model,
            reuse,
            timing,
            output,
        } => commands::bench(model, reuse.as_deref(), timing, output, false),
        Command::Breakdown {
            model,
            reuse,
            timing,
            output,
        } => commands::bench(model, reuse.as_deref(), timing, output, true),
        Command::Params {
            model,
            reuse,
            output,
        } => commands::params(model, reuse.as_deref(), output),
        Command::Reuse {
            model,
            schedules,
            timing,
            output,
        } => commands::reuse(model, schedules.as_deref(), timing, output),
        Command::Prune {
            model,
            args,
            output,
        } => commands::prune(model, args, output),
        Command::Verify { model } => commands::verify(model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
