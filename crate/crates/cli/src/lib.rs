//! `iscf` command line: train, eval, infer, gradcheck, bench-attn, ablate
//! and synth-data.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data or checkpoint
//! error, 3 non-finite training loss, 4 gradient check breach.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use iscf_core::Error;

pub use config::{Overrides, RunConfig};

/// Process outcome other than success, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    NonFinite(String),
    Breach(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::NonFinite(_) => 3,
            Failure::Breach(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::NonFinite(m) => write!(f, "training aborted: {m}"),
            Failure::Breach(m) => write!(f, "gradient check failed: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidConfig(_)
            | Error::InvalidSpec(_)
            | Error::BadInputExtent { .. }
            | Error::OddGrid { .. }
            | Error::OddChannels(_)
            | Error::NonIntegralOutputExtent(_) => Failure::Config(msg),
            Error::NonFiniteLoss { .. } => Failure::NonFinite(msg),
            _ => Failure::Data(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "iscf", version, about = "Efficient-attention U-shaped transformer with inter-scale context fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct DataSource {
    /// Directory of `<id>.ppm` / `<id>_mask.pgm` pairs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate synthetic ellipse lesions from the config's `synth` section.
    #[arg(long)]
    pub synth: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from scratch; writes history.csv, best.ckpt and effective-config.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        source: DataSource,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint; writes metrics.json and optional overlays.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        source: DataSource,
        #[arg(long)]
        out: PathBuf,
        /// Supplies the synthetic spec and the train/val split settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which part of the train/val split to score.
        #[arg(long, value_enum, default_value_t = commands::Split::All)]
        split: commands::Split,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        synth_count: Option<usize>,
        /// Write a contour overlay per sample under `<out>/overlays`.
        #[arg(long)]
        overlays: bool,
    },
    /// Predict the mask of a single P6 image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output P5 mask at the image's original resolution.
        #[arg(long)]
        out: PathBuf,
        /// Also write the prediction contour over the image.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Finite-difference gradient verification.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = commands::ScopeArg::Primitives)]
        scope: commands::ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one backward rule (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Time efficient vs standard attention across token counts.
    BenchAttn {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_value = "efficient,standard")]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Minimum time spent per measurement, in milliseconds.
        #[arg(long, default_value_t = 200)]
        min_time_ms: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and score one model per ISCF stage set.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        source: DataSource,
        /// Stage sets separated by commas, e.g. `1,12,123`.
        #[arg(long, value_delimiter = ',', default_value = "1,12,123")]
        scales: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic dataset as NetPBM pairs.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.code()
        }
    }
}
