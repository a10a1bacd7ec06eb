//! Command-line front end: `build`, `diagnose`, `train`, `eval`, `gradcheck`
//! and `synth`.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric failure
//! (divergence, failed gradient check).

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rescnds::diagnostic::ProbeUnit;

pub use config::{Preset, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rescnds::Error),
    /// A numeric check failed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(rescnds::Error::Numeric(_)) => 3,
            CliError::Core(_) => 2,
            CliError::Failed(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "rescnds", version, about = "Deeply supervised residual CNN toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an architecture file and print its shape table.
    Build {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        arch: ArchArgs,
    },
    /// Run the vanishing-gradient probe on a branchless architecture.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Train on a dataset directory.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Finite-difference check of every layer kind and a whole network.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write the synthetic 3-class dataset to `--out`.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 200)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 40)]
        size: usize,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Architecture file (written by `build`, read by other commands).
    #[arg(long)]
    pub arch: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    /// Add the three shortcut connections.
    #[arg(long)]
    pub residual: bool,
    /// Channel multiplier.
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Input side length.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub aux_attach: Option<String>,
    /// Build without the auxiliary branch.
    #[arg(long)]
    pub no_aux: bool,
    #[arg(long)]
    pub post_add_relu: bool,
    /// Build a plain chain of this many 3x3 convs instead.
    #[arg(long)]
    pub stack_depth: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ten_crop: bool,
    /// Defaults to `<out>/best.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProbeUnitArg {
    Iter,
    Epoch,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_enum)]
    pub probe_unit: Option<ProbeUnitArg>,
    /// Apply plain SGD updates at this rate between probe steps.
    #[arg(long)]
    pub probe_sgd_lr: Option<f64>,
}

fn flag(b: bool) -> Option<bool> {
    b.then_some(true)
}

impl CommonArgs {
    fn overrides(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            out: self.out.clone(),
            arch: self.arch.clone(),
            dataset: self.dataset.clone(),
            preset: self.preset,
            ..Default::default()
        }
    }
}

impl ArchArgs {
    fn overrides(&self) -> RunConfig {
        RunConfig {
            residual: flag(self.residual),
            width: self.width,
            classes: self.classes,
            input_size: self.input_size,
            aux_attach: self.aux_attach.clone(),
            no_aux: flag(self.no_aux),
            post_add_relu: flag(self.post_add_relu),
            stack_depth: self.stack_depth,
            ..Default::default()
        }
    }
}

/// Reads `--config` (if any), applies flag overrides and fills defaults.
fn resolve(common: &CommonArgs, flags: RunConfig) -> Result<RunConfig, CliError> {
    let file = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    Ok(file.overlay(common.overrides()).overlay(flags).resolve())
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    match cli.command {
        Command::Build { common, arch } => commands::build(&resolve(&common, arch.overrides())?, stdout),
        Command::Diagnose { common, arch, probe } => {
            let flags = arch.overrides().overlay(RunConfig {
                threshold: probe.threshold,
                iters: probe.iters,
                probe_unit: probe.probe_unit.map(|u| match u {
                    ProbeUnitArg::Iter => ProbeUnit::Iter,
                    ProbeUnitArg::Epoch => ProbeUnit::Epoch,
                }),
                probe_sgd_lr: probe.probe_sgd_lr,
                ..Default::default()
            });
            commands::diagnose(&resolve(&common, flags)?, stdout)
        }
        Command::Train { common, arch, train } => {
            let flags = arch.overrides().overlay(RunConfig {
                alpha0: train.alpha0,
                epochs: train.epochs,
                lr: train.lr,
                batch: train.batch,
                init_std: train.init_std,
                resume: flag(train.resume),
                ..Default::default()
            });
            commands::train(&resolve(&common, flags)?, stdout)
        }
        Command::Eval { common, arch, eval } => {
            let flags = arch.overrides().overlay(RunConfig {
                ten_crop: flag(eval.ten_crop),
                checkpoint: eval.checkpoint,
                split: eval.split,
                ..Default::default()
            });
            commands::eval(&resolve(&common, flags)?, stdout)
        }
        Command::Gradcheck { common } => commands::gradcheck(&resolve(&common, RunConfig::default())?, stdout),
        Command::Synth {
            common,
            train_per_class,
            test_per_class,
            size,
        } => {
            let cfg = resolve(&common, RunConfig::default())?;
            commands::synth(&cfg, train_per_class, test_per_class, size, stdout)
        }
    }
}

/// Runs the CLI and converts the outcome into a process exit code, printing
/// errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(args, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
