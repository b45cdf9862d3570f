//! Command-line driver: inference, toy-scale training, kernel benchmarks,
//! gradient checks and metric evaluation.
//!
//! [`run_with`] executes one invocation against arbitrary output streams and
//! returns the process exit status, so the binary is a thin shell over it.
//!
//! | status | meaning |
//! |-------:|---------|
//! | 0  | success |
//! | 1  | gradient check over tolerance |
//! | 2  | checkpoint missing or unreadable |
//! | 3  | image missing or undecodable |
//! | 4  | image size incompatible with the model |
//! | 5  | unpaired files or empty corpus |
//! | 64 | bad arguments or configuration |
//! | 70 | any other runtime failure |

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use colormamba::Error;

pub use config::{Precision, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GRADCHECK: i32 = 1;
pub const EXIT_CHECKPOINT: i32 = 2;
pub const EXIT_IMAGE: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_RUNTIME: i32 = 70;

pub const THREADS_ENV: &str = "COLORMAMBA_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "colormamba",
    version,
    about = "NIR-to-RGB colorization with selective state-space scans"
)]
pub struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ablation toggles to use.
    #[arg(long, global = true, value_parser = ["wo-mamba", "mamba", "mamba-att", "mamba-att-padding"])]
    pub preset: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Colorize one grayscale NIR image into an RGB PNG.
    Infer {
        nir: PathBuf,
        out: PathBuf,
        /// Defaults to `paths.checkpoint`, then `<paths.out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on a paired corpus and write checkpoints plus a log.
    Train {
        /// Continue from this checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Overrides `paths.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `paths.out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the sequential and parallel scan kernels.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchMode::Scan)]
        mode: BenchMode,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Score predictions against references with matching file names.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Emit CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    /// 1-D scans over `bench.lengths`.
    Scan,
    /// The padded four-direction scan at `bench.height × bench.width`.
    Scan2d,
}

/// A failed command: exit status plus message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Shape { .. } => EXIT_SHAPE,
            Error::Data(_) => EXIT_DATA,
            Error::Image(_) => EXIT_IMAGE,
            Error::Format(_) => EXIT_CHECKPOINT,
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_RUNTIME, e.to_string())
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

/// Resolves the configuration: defaults, then `--config`, then flags.
pub fn resolve_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.preset {
        cfg.apply_preset(p)?;
    }
    Ok(cfg)
}

fn thread_pool() -> std::result::Result<Option<rayon::ThreadPool>, Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::new(
            EXIT_USAGE,
            format!("{THREADS_ENV} must be a positive integer, got `{raw}`"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| Failure::new(EXIT_RUNTIME, e.to_string()))
}

/// Runs one invocation. `args` includes the program name.
pub fn run_with<I, S>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let result = thread_pool().and_then(|pool| {
        let cfg = resolve_config(&cli)?;
        match pool {
            Some(p) => p.install(|| commands::dispatch(&cli.command, &cfg, out, err)),
            None => commands::dispatch(&cli.command, &cfg, out, err),
        }
    });
    let _ = out.flush();
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

/// [`run_with`] on the process's stdout and stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}
