use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod manifest;

use config::PruneMethodArg;

/// Distilled-pruning experiments: distill, prune, analyze, compare, sweep.
#[derive(Debug, Parser)]
#[command(name = "dprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Parent directory for run directories.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct PruneFlags {
    #[arg(long, value_enum)]
    method: Option<PruneMethodArg>,
    /// Rewind point k (IMP only).
    #[arg(long)]
    rewind_epoch: Option<u32>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    syn_iters: Option<usize>,
    /// Distill run directory or synthetic dataset container.
    #[arg(long)]
    syn: Option<PathBuf>,
    /// Overrides `seeds.init`.
    #[arg(long)]
    init_seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Distill a synthetic training set from the configured task.
    Distill(Common),
    /// Run IMP, distilled pruning or the combined pipeline.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: PruneFlags,
        /// Continue an interrupted run from its last completed iteration.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations, leaving the run resumable.
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Interpolation, landscape and Hessian analyses of a prune run.
    Analyze {
        /// Prune run directory.
        #[arg(long)]
        record: PathBuf,
        /// Replaces the `analysis` section of the prune run's config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "lmc,hessian")]
        analyses: Vec<commands::analyze::Analysis>,
        /// Pruning iterations to analyze.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
        /// Overrides the two data-order seeds of the interpolation branches.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        order_seeds: Option<Vec<u64>>,
    },
    /// Synthetic-over-IMP ratios at every shared analyzed sparsity.
    Compare {
        /// Analyze run directory of the synthetic (distilled or combined) prune run.
        #[arg(long)]
        syn: PathBuf,
        /// Analyze run directory of the IMP prune run.
        #[arg(long)]
        imp: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Prune (and optionally analyze) once per init seed in separate processes,
    /// then merge the ledgers.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: PruneFlags,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        analyses: Option<Vec<commands::analyze::Analysis>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Distill(common) => commands::distill::run(&common),
        Command::Prune {
            common,
            flags,
            resume,
            halt_after,
        } => commands::prune::run(&common, &flags, resume, halt_after),
        Command::Analyze {
            record,
            config,
            out_dir,
            analyses,
            checkpoints,
            order_seeds,
        } => commands::analyze::run(&commands::analyze::Request {
            record,
            config,
            out_dir,
            analyses,
            checkpoints,
            order_seeds,
        }),
        Command::Compare { syn, imp, out_dir } => commands::compare::run(&syn, &imp, &out_dir),
        Command::Sweep {
            common,
            flags,
            seeds,
            analyses,
        } => commands::sweep::run(&common, &flags, &seeds, analyses.as_deref()),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
