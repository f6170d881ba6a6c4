//! Command-line front end: pruning, fusion, pipelines, and evaluation with
//! CSV outputs.

mod commands;
mod data;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "prunefuse", version, about = "Structured pruning and model fusion toolkit")]
struct Cli {
    /// RNG seed applied to every stochastic step
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (0 = all cores; 1 = fully deterministic schedule)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Primary output path (file or directory, depending on the subcommand)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accuracy and size statistics for a model, as a CSV row
    Eval(commands::EvalArgs),
    /// Mean l2 distance between two models' outputs
    Divergence(commands::DivergenceArgs),
    /// Accuracy over the 2D parameter plane through three models
    Landscape(commands::LandscapeArgs),
    /// Intra-Fusion accuracy across source/target distribution combinations
    Ablation(commands::AblationArgs),
    /// Dependency-group table for a model
    Groups(commands::GroupsArgs),
    /// Prune one group or all groups, conventionally or by Intra-Fusion
    Prune(commands::PruneArgs),
    /// Align and average several models into one
    Fuse(commands::FuseArgs),
    /// Split-data pipelines: whole-data baseline, PaF, or FaP
    Pipeline(commands::PipelineArgs),
    /// Train an architecture from scratch
    Train(commands::TrainArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    prunefuse_core::parallel::configure_threads(cli.threads);
    let ctx = commands::Context {
        seed: cli.seed,
        out: cli.out,
    };
    let result = match cli.command {
        Command::Eval(args) => commands::eval(&ctx, args),
        Command::Divergence(args) => commands::divergence(&ctx, args),
        Command::Landscape(args) => commands::landscape(&ctx, args),
        Command::Ablation(args) => commands::ablation(&ctx, args),
        Command::Groups(args) => commands::groups(&ctx, args),
        Command::Prune(args) => commands::prune(&ctx, args),
        Command::Fuse(args) => commands::fuse(&ctx, args),
        Command::Pipeline(args) => commands::pipeline(&ctx, args),
        Command::Train(args) => commands::train(&ctx, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
