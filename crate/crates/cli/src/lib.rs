//! The `urbdense` command line: one subcommand per pipeline stage, plus the
//! library form of the synthetic experiment in [`pipeline`].
//!
//! Exit codes: 0 success, 1 usage error, 2 data or processing error.

pub mod commands;
pub mod pipeline;
pub mod run_config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use run_config::RunConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 1.
    Usage(String),
    /// Unreadable, inconsistent or unusable data; exit code 2.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<urbdense_core::Error> for CliError {
    fn from(e: urbdense_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<urbdense_segnet::Error> for CliError {
    fn from(e: urbdense_segnet::Error) -> Self {
        match e {
            urbdense_segnet::Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "urbdense", version, about = "Urban density mapping from annual reflectance composites")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic step; overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Half-open row range `START:END`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rows {
    pub start: usize,
    pub end: usize,
}

impl std::str::FromStr for Rows {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or_else(|| format!("expected START:END, got {s:?}"))?;
        let start: usize = a.trim().parse().map_err(|_| format!("bad row {a:?}"))?;
        let end: usize = b.trim().parse().map_err(|_| format!("bad row {b:?}"))?;
        if end <= start {
            return Err(format!("empty row range {s:?}"));
        }
        Ok(Rows { start, end })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates a synthetic city and renders its observation stack.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Season filter and rolling median composite of one year.
    Composite {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        year: i32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-band percentile divisors of a composite.
    Scales {
        #[arg(long)]
        composite: PathBuf,
        #[arg(long)]
        year: i32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Divides a composite by band scales.
    Standardize {
        #[arg(long)]
        composite: PathBuf,
        #[arg(long)]
        scales: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Density labels from a grid raster with bands `bar` and `height`.
    Label {
        #[arg(long)]
        grids: PathBuf,
        #[arg(long)]
        year: i32,
        /// Directory receiving horizontal.dmr and vertical.dmr.
        #[arg(long)]
        out: PathBuf,
    },
    /// Thins, balances and cuts training and validation patches.
    Sample {
        #[arg(long)]
        composite: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Restrict sampling to these rows.
        #[arg(long)]
        rows: Option<Rows>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a network (fcn, deeplab) or the texture forest (rf).
    Train {
        #[arg(long)]
        arch: String,
        /// Output directory of `sample`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Maps a composite with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        composite: PathBuf,
        #[arg(long)]
        year: i32,
        /// Map only these rows of the composite.
        #[arg(long)]
        rows: Option<Rows>,
        /// Directory receiving labels.dmr and probabilities.dmr.
        #[arg(long)]
        out: PathBuf,
    },
    /// Savitzky-Golay smoothing of annual class probabilities.
    Smooth {
        /// One probability raster per year, in year order.
        #[arg(long, num_args = 1.., required = true)]
        probabilities: Vec<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        years: Vec<i32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a label map against a reference.
    Evaluate {
        #[arg(long)]
        predicted: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Compare with these rows of the reference.
        #[arg(long)]
        rows: Option<Rows>,
        /// Metrics CSV; the confusion matrix goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired McNemar test of two maps.
    Mcnemar {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        rows: Option<Rows>,
        /// One-vs-rest test for this class name.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of growth derived from two mapped epochs.
    Growth {
        #[arg(long)]
        earlier: PathBuf,
        #[arg(long)]
        later: PathBuf,
        #[arg(long)]
        reference_earlier: PathBuf,
        #[arg(long)]
        reference_later: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class areas and urban forms per region and year.
    Trends {
        #[arg(long, num_args = 1.., required = true)]
        horizontal: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        vertical: Vec<PathBuf>,
        /// Raster whose first band holds integer region ids.
        #[arg(long)]
        regions: PathBuf,
        /// `id,name` CSV naming the region ids.
        #[arg(long)]
        names: Option<PathBuf>,
        /// `region,year,population` CSV.
        #[arg(long)]
        population: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks; exits 2 when any check fails.
    Gradcheck {
        /// layers, fcn, deeplab or all.
        #[arg(long, default_value = "all")]
        arch: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a label map as a binary PPM image.
    Render {
        #[arg(long)]
        labels: PathBuf,
        /// Pixels per cell.
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Composite { .. } => "composite",
            Command::Scales { .. } => "scales",
            Command::Standardize { .. } => "standardize",
            Command::Label { .. } => "label",
            Command::Sample { .. } => "sample",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Smooth { .. } => "smooth",
            Command::Evaluate { .. } => "evaluate",
            Command::Mcnemar { .. } => "mcnemar",
            Command::Growth { .. } => "growth",
            Command::Trends { .. } => "trends",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Render { .. } => "render",
        }
    }
}

/// Resolves the run configuration: defaults, file, `--set`, then `--seed`.
pub fn resolve_config(common: &CommonArgs) -> CliResult<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    for pair in &common.overrides {
        config.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        config.set("seed", &seed.to_string())?;
    }
    Ok(config)
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match resolve_config(&cli.common).and_then(|config| commands::run(&cli.command, &config)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("urbdense {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
