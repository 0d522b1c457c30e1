//! `egomotion`: synthesize data, train, evaluate and preview augmentations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Context;
use config::{RunConfig, KEYS};
use egomotion::Error;

#[derive(Parser, Debug)]
#[command(name = "egomotion", version, about = "Monocular ego-motion estimation with a recurrent pose network")]
struct Cli {
    /// Directory that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    run_dir: PathBuf,
    /// `key = value` config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Threads for frame loading, synthesis and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset in KITTI layout into data.root.
    Synth,
    /// Train the selected phase; writes checkpoints and log.csv into train.out.
    Train {
        /// Continue from the latest checkpoint in train.out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint; writes lengths.csv, speeds.csv, sequences.csv
    /// and trajectories into eval.out.
    Eval,
    /// Dump augmented training samples (frames and targets) into preview.out.
    AugmentPreview,
    /// Print the resolved configuration.
    ShowConfig {
        /// List every key with its default and description instead.
        #[arg(long)]
        keys: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CONTRACT: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. }
        | Error::Image { .. }
        | Error::Parse { .. }
        | Error::Data(_)
        | Error::Checkpoint(_)
        | Error::Generation(_) => EXIT_DATA,
        Error::Contract(_) | Error::Shape(_) | Error::InvalidArgument(_) | Error::DegenerateOrientation { .. } => {
            EXIT_CONTRACT
        }
    }
}

fn resolve(cli: &Cli) -> egomotion::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    for s in &cli.set {
        cfg.apply(s)?;
    }
    if cli.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> egomotion::Result<String> {
    let ctx = Context {
        config: resolve(&cli)?,
        run_dir: cli.run_dir,
        force: cli.force,
        workers: cli.workers,
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Train { resume } => commands::train(&ctx, resume),
        Command::Eval => commands::eval(&ctx),
        Command::AugmentPreview => commands::augment_preview(&ctx),
        Command::ShowConfig { keys: false } => Ok(ctx.config.resolved().trim_end().to_string()),
        Command::ShowConfig { keys: true } => Ok(KEYS
            .iter()
            .map(|(k, v, d)| format!("{k} = {v}\n    {d}"))
            .collect::<Vec<_>>()
            .join("\n")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
