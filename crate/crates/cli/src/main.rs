//! `neuropath`: batch driver for synthesis, training, evaluation and reports.
//!
//! Failures print one `error_code: message` line on stderr and exit with
//! status 2.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::Overrides;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "neuropath", version, about = "Motor-imagery EEG decoding across electrode layouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON job config, or a `run.json` from an earlier run.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Seeded {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    seeded: Seeded,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct Finetune {
    #[command(flatten)]
    train: Train,
    /// Distil from the skeleton teacher.
    #[arg(long, value_name = "BOOL")]
    kd: Option<bool>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic EEG dataset.
    Synth(Seeded),
    /// Generate and augment a skeleton motion dataset.
    Skeleton(Seeded),
    /// Train decoder, adapters and heads on one or more datasets.
    Pretrain(Train),
    /// Fine-tune a pretrained checkpoint on a new dataset.
    Finetune(Finetune),
    /// Score a checkpoint on a dataset.
    Eval(Common),
    /// ERD/ERS report per class and channel.
    Erd(Common),
    /// Checkpoint summary including parameter counts.
    Inspect(Common),
}

fn overrides(common: Common) -> Overrides {
    Overrides { config: common.config, out: common.out, ..Overrides::default() }
}

fn seeded(s: Seeded) -> Overrides {
    Overrides { seed: s.seed, ..overrides(s.common) }
}

fn train(t: Train) -> Overrides {
    Overrides { epochs: t.epochs, ..seeded(t.seeded) }
}

fn init_logging() -> Result<(), CliError> {
    let level = match std::env::var("NEUROPATH_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return Err(CliError::Usage(format!("NEUROPATH_LOG must be quiet, info or debug, got `{other}`"))),
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return Err(CliError::Usage(first.to_string()));
        }
    };
    init_logging()?;
    match cli.command {
        Command::Synth(s) => commands::synth(&seeded(s)),
        Command::Skeleton(s) => commands::skeleton(&seeded(s)),
        Command::Pretrain(t) => commands::pretrain(&train(t)),
        Command::Finetune(f) => commands::finetune(&Overrides { kd: f.kd, ..train(f.train) }),
        Command::Eval(c) => commands::eval(&overrides(c)),
        Command::Erd(c) => commands::erd(&overrides(c)),
        Command::Inspect(c) => commands::inspect(&overrides(c)),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(2)
        }
    }
}
