//! `refgame`: reproducible runs of the referential game pipeline.
//!
//! Each subcommand reads a JSON [`config::RunConfig`], applies command line
//! overrides and writes its outputs under `out_dir/run_id`.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod seeds;
pub mod summary;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_analyze, cmd_eval, cmd_gen_data, cmd_probe, cmd_train, run_pipeline, AnalyzeInput};
pub use config::{Overrides, RunConfig, Variant};
pub use error::{CliError, Result};
pub use report::cmd_report;
pub use seeds::cmd_seeds;

#[derive(Debug, Parser)]
#[command(name = "refgame", version, about = "Referential game training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (training, games, permutations, probes).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated variants such as `+aug-shared,-aug+shared,simclr`.
    #[arg(long, allow_hyphen_values = true)]
    variant: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the dataset and write its manifest.
    GenData(Common),
    /// Train every variant of the matrix.
    Train(Common),
    /// Game accuracy on the val, OOD and blob splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// |P|, nMI, WNsim and permutation tests.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["records", "features"])]
        checkpoint: Option<PathBuf>,
        /// Analyse a `sample_id,category_id,symbol` CSV instead of checkpoints.
        #[arg(long, conflicts_with = "features")]
        records: Option<PathBuf>,
        /// Cluster a `sample_id,category_id,f0,...` CSV into `--k` symbols.
        #[arg(long, requires = "k")]
        features: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Linear probes on frozen Sender-encoder features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full pipeline per seed with avg/sd/min/max summary.
    Seeds {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; overrides the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Seeds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// SVG figures of training curves and nMI.
    Report(Common),
}

fn load(c: &Common, seeds: Option<Vec<u64>>) -> Result<RunConfig> {
    let overrides = Overrides {
        seed: c.seed,
        variants: c.variant.as_deref().map(Variant::parse_list).transpose()?,
        out_dir: c.out.clone(),
        run_id: c.run_id.clone(),
        epochs: c.epochs,
        seeds,
    };
    RunConfig::load(c.config.as_deref(), &overrides)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => print_json(&cmd_gen_data(&load(&c, None)?)?),
        Command::Train(c) => print_json(&cmd_train(&load(&c, None)?)?),
        Command::Eval { common, checkpoint } => print_json(&cmd_eval(&load(&common, None)?, checkpoint.as_deref())?),
        Command::Analyze { common, checkpoint, records, features, k } => {
            let input = match (records, features, k) {
                (Some(r), _, _) => AnalyzeInput::Records(r),
                (None, Some(path), Some(k)) => AnalyzeInput::Features { path, k },
                _ => AnalyzeInput::Checkpoints(checkpoint),
            };
            print_json(&cmd_analyze(&load(&common, None)?, &input)?)
        }
        Command::Probe { common, checkpoint } => print_json(&cmd_probe(&load(&common, None)?, checkpoint.as_deref())?),
        Command::Seeds { common, seeds, jobs } => {
            let report = cmd_seeds(&load(&common, seeds)?, jobs)?;
            print!("{}", summary::render_table(&report.rows));
            Ok(())
        }
        Command::Report(c) => {
            for p in cmd_report(&load(&c, None)?)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

/// Caps the global worker pool at `REFGAME_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("REFGAME_THREADS") else { return Ok(()) };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return Err(CliError::Config(format!("REFGAME_THREADS={v:?} is not a positive integer"))),
    };
    #[cfg(feature = "parallel")]
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
