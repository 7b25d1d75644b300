//! Command-line driver: configuration, checkpoints and one subcommand per
//! stage of the workflow (generate, pretrain, train, eval, analysis).

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration, missing inputs.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] crnet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "crnet",
    version,
    about = "Class-regularized few-shot classification"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Input checkpoint (required by eval and the analysis commands).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, env = "CRNET_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Evaluation tasks (eval, sweep-basis) or tests (metashift, fid).
    #[arg(long, global = true)]
    pub num_tasks: Option<usize>,
    #[arg(long, global = true, env = "CRNET_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset to disk.
    Generate,
    /// Supervised pre-training of the embedding on the training split.
    Pretrain,
    /// Episodic training; keeps the last and the best-on-validation checkpoint.
    Train,
    /// Accuracy of both metric heads and the mean-prototype baseline on the test split.
    Eval,
    /// Descriptor stability per test class, decoded vs. mean prototype.
    Metashift,
    /// Fréchet distance between support and query features per task.
    Fid,
    /// Test-split embeddings as CSV.
    Export,
    /// Train and evaluate one model per basis count.
    SweepBasis {
        /// Comma-separated basis counts; overrides `sweep.bases`.
        #[arg(long, value_delimiter = ',')]
        bases: Option<Vec<usize>>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = commands::Context::new(&cli.global, &cli.command)?;
    let go = || match &cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Train => commands::train(&ctx).map(|_| ()),
        Command::Eval => commands::eval(&ctx).map(|_| ()),
        Command::Metashift => commands::metashift(&ctx).map(|_| ()),
        Command::Fid => commands::fid(&ctx).map(|_| ()),
        Command::Export => commands::export(&ctx).map(|_| ()),
        Command::SweepBasis { .. } => commands::sweep_basis(&ctx).map(|_| ()),
    };
    match cli.global.threads {
        Some(0) => Err(CliError::Usage("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(go),
        None => go(),
    }
}
