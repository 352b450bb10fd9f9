//! The `mtm` command line: data generation, training, sampling, gradient
//! checks, metrics, offset ablation and dumps, and step benchmarks.

mod commands;
mod config;

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{bench, gradcheck_with, load_generator, run};
pub use config::{DataConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "mtm", version, about = "Latent-modulated deformable convolution in a toy style GAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic limb dataset as PPM images plus a pose CSV.
    GenData(ConfigArgs),
    /// Train a generator/discriminator pair.
    Train(ConfigArgs),
    /// Sample an image grid from a checkpoint.
    Sample(SampleArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// RFFD between two image sets.
    Metrics(MetricsArgs),
    /// Compare samples with trained and zeroed offsets.
    AblateOffsets(AblateArgs),
    /// Write one MTM layer's offsets as CSV and heat maps.
    DumpOffsets(DumpArgs),
    /// Time training steps for each MTM placement.
    Bench(ConfigArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed` (train, bench) or `data.seed` (gen-data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Block,
    Full,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ScopeArg::Ops)]
    pub scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `gradcheck.csv`; the report always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    /// A directory of PPM files, a checkpoint, or `data:SEED:RESOLUTION`.
    pub set_a: String,
    pub set_b: String,
    /// Images drawn from checkpoint and data sets.
    #[arg(long, default_value_t = 512)]
    pub n: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub n: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the dataset the held-out reals come from.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// MTM layer, e.g. `g.b8.conv0`.
    #[arg(long)]
    pub layer: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Config = 1,
    Numeric = 2,
    Gradcheck = 3,
    Checkpoint = 4,
}

/// A failed command with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub status: ExitStatus,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(status: ExitStatus, error: impl Into<anyhow::Error>) -> Self {
        Self {
            status,
            error: error.into(),
        }
    }

    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self::new(ExitStatus::Config, error)
    }

    pub fn checkpoint(error: impl Into<anyhow::Error>) -> Self {
        Self::new(ExitStatus::Checkpoint, error)
    }

    pub fn code(&self) -> i32 {
        self.status as i32
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Core errors default to the config status, except numeric aborts and
/// checkpoint problems.
impl From<mtm_core::Error> for Failure {
    fn from(e: mtm_core::Error) -> Self {
        let status = match e {
            mtm_core::Error::Numeric(_) => ExitStatus::Numeric,
            mtm_core::Error::Checkpoint(_) => ExitStatus::Checkpoint,
            _ => ExitStatus::Config,
        };
        Self::new(status, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::config(e)
    }
}

pub type CmdResult = Result<(), Failure>;

/// Parses arguments, runs the command and returns the exit code, reporting
/// failures on stderr.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitStatus::Config as i32 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command, stdout) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}
