//! `instsep` command-line tool: scene generation, guided runs, evaluation,
//! ablation sweeps and the self-test battery.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.

pub mod commands;
pub mod selftest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    eval, gen_scenes, run, sweep, EvalArgs, GenArgs, Manifest, ManifestEntry, RunArgs, SweepArgs, Toggles,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<instsep::Error> for CliError {
    fn from(e: instsep::Error) -> Self {
        let code = match e {
            instsep::Error::Divergence(_) => EXIT_DIVERGENCE,
            instsep::Error::Config(_) | instsep::Error::InvalidSigma(_) | instsep::Error::BadLayer { .. } => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "instsep", version, about = "Training-free multi-instance separation guidance on a toy 3D denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded synthetic scenes and a `scenes.json` manifest.
    GenScenes(GenCli),
    /// Sample every scene of a manifest (or one scene directory).
    Run(RunCli),
    /// Score predictions against ground truth into `results.csv`.
    Eval(EvalCli),
    /// Run and evaluate once per value of one parameter.
    Sweep(SweepCli),
    /// Run the invariant battery and print a pass/fail table.
    Selftest(SelftestCli),
}

#[derive(Debug, Args)]
pub struct GenCli {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub gap: usize,
    #[arg(long, default_value_t = 2)]
    pub instances: usize,
    /// Voxels per axis.
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    /// Condition tokens per image axis.
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    #[arg(long, default_value_t = 4)]
    pub size_min: usize,
    #[arg(long, default_value_t = 6)]
    pub size_max: usize,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ToggleFlags {
    #[arg(long)]
    pub no_isg: bool,
    /// Disable smoothing, adaptive scaling and momentum together.
    #[arg(long)]
    pub no_sgu: bool,
    #[arg(long)]
    pub no_gm: bool,
    #[arg(long)]
    pub no_sr: bool,
    #[arg(long)]
    pub no_momentum: bool,
}

impl ToggleFlags {
    fn toggles(&self) -> Toggles {
        Toggles {
            no_isg: self.no_isg,
            no_sgu: self.no_sgu,
            no_gm: self.no_gm,
            no_sr: self.no_sr,
            no_momentum: self.no_momentum,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunCli {
    /// Directory holding `scenes.json`, or a single scene directory.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run configuration; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub toggles: ToggleFlags,
    /// Fill `time_s` with measured wall time (breaks byte-identical reruns).
    #[arg(long)]
    pub record_time: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvalCli {
    #[arg(long)]
    pub scenes: PathBuf,
    /// Output directory of `run`.
    #[arg(long)]
    pub preds: PathBuf,
    /// Results file; defaults to `<preds>/results.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluation settings; defaults to the config echo in `<preds>`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepParam {
    GuidedLayerMax,
    GuidedStepMax,
    Alpha,
    Sigma,
    Toggles,
}

#[derive(Debug, Args)]
pub struct SweepCli {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values; defaults to the standard ablation list.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SelftestCli {
    /// Run only checks whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    /// Add this amount to one analytic gradient entry before the gradient check.
    #[arg(long, hide = true)]
    pub corrupt_gradient: Option<f64>,
}

/// Parse `args` (including the program name) and execute, returning the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenScenes(a) => {
            let manifest = gen_scenes(&GenArgs {
                out: a.out,
                count: a.count,
                seed: a.seed,
                gap: a.gap,
                instances: a.instances,
                grid: a.grid,
                tokens: a.tokens,
                size_min: a.size_min,
                size_max: a.size_max,
            })?;
            eprintln!("wrote {} scenes", manifest.scenes.len());
            Ok(())
        }
        Command::Run(a) => {
            let cfg = commands::load_config(a.config.as_deref())?;
            run(&RunArgs {
                scenes: a.scenes,
                out: a.out,
                config: cfg,
                toggles: a.toggles.toggles(),
                record_time: a.record_time,
                jobs: a.jobs,
            })?;
            Ok(())
        }
        Command::Eval(a) => {
            let cfg = match a.config.as_deref() {
                Some(p) => Some(commands::load_config(Some(p))?),
                None => None,
            };
            let path = eval(&EvalArgs { scenes: a.scenes, preds: a.preds, out: a.out, config: cfg, jobs: a.jobs })?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Sweep(a) => {
            let cfg = commands::load_config(a.config.as_deref())?;
            let path = sweep(&SweepArgs {
                param: a.param,
                values: a.values,
                scenes: a.scenes,
                out: a.out,
                config: cfg,
                jobs: a.jobs,
            })?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Selftest(a) => {
            let opts = selftest::Options { filter: a.filter, corrupt_gradient: a.corrupt_gradient };
            let results = selftest::run_battery(&opts);
            eprint!("{}", selftest::format_table(&results));
            if results.is_empty() {
                return Err(CliError::usage("no self-test matches the filter"));
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::data(format!("{failed} self-test check(s) failed")));
            }
            Ok(())
        }
    }
}
