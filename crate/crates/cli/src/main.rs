mod commands;
mod run_dir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use signer_core::pipeline::PipelineError;

#[derive(Parser)]
#[command(name = "signer", version, about = "Prompt to gloss to stabilised sign poses, at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory, overriding the config's `out_dir`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabularies, the pose prior database and the corpus splits.
    GenCorpus,
    /// Train the gloss translator, its snapshots and the no-SAGM ablation.
    TrainSlul,
    /// Train the expert gates on top of the frozen translators.
    TrainMoe {
        /// Translator checkpoint to gate (defaults to the run's `slul.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Stabilise a pose file against its own hand keypoints.
    Stabilize {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run one prompt through translation, gating, selection and stabilisation.
    Pipeline {
        /// Prompt text, optionally starting with a language tag such as `<bsl>`.
        #[arg(long)]
        prompt: String,
        /// Translator checkpoint (defaults to the run's `slul.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score every trained variant on the test split and write the table.
    Eval,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing(_) => 2,
            CliError::Pipeline(e) if e.is_numerical() => 3,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenCorpus => commands::gen_corpus(&cli.common),
        Command::TrainSlul => commands::train_slul(&cli.common),
        Command::TrainMoe { checkpoint } => commands::train_moe(&cli.common, checkpoint.as_deref()),
        Command::Stabilize { input } => commands::stabilize(&cli.common, &input),
        Command::Pipeline { prompt, checkpoint } => commands::pipeline(&cli.common, &prompt, checkpoint.as_deref()),
        Command::Eval => commands::eval(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
