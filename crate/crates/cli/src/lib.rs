//! Command-line front end for the `stic` binary.
//!
//! [`run`] parses argv, dispatches to a subcommand and maps the outcome to an
//! exit code: 0 on success, 1 for usage errors, 2 for runtime failures. Every
//! successful run leaves a `manifest.txt` in its output directory listing the
//! resolved configuration and every file written.

mod commands;
mod manifest;
pub mod viz;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};

pub use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(
    name = "stic",
    version,
    about = "Train classifiers that synthesize their own classes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, last occurrence wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root seed; every subsystem derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct CkptArgs {
    /// Checkpoint written by `train` or `score-train`.
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a classifier with recurrent self-analysis.
    Train(Common),
    /// Synthesize class-conditional samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Synthesize two class samples and walk the straight line between them.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value_t = 8)]
        points: usize,
        /// Extra sampler steps applied to every interpolated point.
        #[arg(long, default_value_t = 0)]
        refine: usize,
    },
    /// Synthesize per class and score the samples against the dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CkptArgs,
    },
    /// Render the argmax class over a grid of 2-D inputs.
    BoundaryViz {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// `x0,x1,y0,y1`; defaults to the data bounding box padded by 1.
        #[arg(long, allow_hyphen_values = true)]
        bounds: Option<String>,
    },
    /// Train with the score-matching regularizer.
    ScoreTrain(Common),
    /// Train the attentive feature-space variant.
    AttentiveTrain(Common),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<stic_core::Error> for CliError {
    fn from(e: stic_core::Error) -> Self {
        match e {
            stic_core::Error::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<stic_core::TensorError> for CliError {
    fn from(e: stic_core::TensorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Usage text of one subcommand, for errors raised after parsing.
pub(crate) fn usage_of(name: &str) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match cmd.find_subcommand_mut(name) {
        Some(sub) => sub.render_help().to_string(),
        None => cmd.render_help().to_string(),
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let outcome = match cli.command {
        Command::Train(c) => commands::train(&c, false),
        Command::ScoreTrain(c) => commands::train(&c, true),
        Command::AttentiveTrain(c) => commands::attentive_train(&c),
        Command::Sample {
            common,
            ckpt,
            class,
            n,
        } => commands::sample(&common, &ckpt, class, n),
        Command::Interpolate {
            common,
            ckpt,
            from,
            to,
            points,
            refine,
        } => commands::interpolate(&common, &ckpt, from, to, points, refine),
        Command::Eval { common, ckpt } => commands::eval(&common, &ckpt),
        Command::BoundaryViz {
            common,
            ckpt,
            grid,
            bounds,
        } => commands::boundary_viz(&common, &ckpt, grid, bounds.as_deref()),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
