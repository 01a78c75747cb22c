//! Command-line driver: data conversion, synthetic data, training,
//! evaluation, sparsity audits, anytime curves and the stride-vs-pool study.

mod commands;
mod config;
mod data;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::exit::{exit_code, ExitError};

#[derive(Debug, Parser)]
#[command(
    name = "spikesparse",
    version,
    about = "Sparse spiking conv nets on event-camera data"
)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for reports, checkpoints and generated data.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bin an AEDAT 3.1 or portable event file into a voxel-grid cache.
    Convert {
        input: PathBuf,
        output: PathBuf,
        /// Bin width in microseconds [default: data.bin_width_us].
        #[arg(long)]
        bin_width_us: Option<u64>,
        /// Number of bins [default: data.timesteps].
        #[arg(long)]
        timesteps: Option<usize>,
        /// Drop events at or after this time [default: bins × width].
        #[arg(long)]
        clip_us: Option<u64>,
    },
    /// Write a synthetic moving-edge dataset to the output directory.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        /// Sensor width and height in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        timesteps: usize,
        #[arg(long, default_value_t = 10_000)]
        bin_width_us: u64,
    },
    /// Train on `data.dir` and write history and checkpoints.
    Train,
    /// Test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Per-layer spike counts of a checkpoint.
    Sparsity(EvalArgs),
    /// Accuracy of one checkpoint cut at several sample durations.
    Anytime {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated timestep counts [default: eval.anytime].
        #[arg(long, value_delimiter = ',')]
        t_list: Option<Vec<usize>>,
    },
    /// Train strided and pooled variants of the configured architecture.
    StudyStride {
        /// Comma-separated seeds [default: eval.study_seeds, or --seed].
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory [default: data.dir].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Timesteps per sample [default: eval.timesteps].
    #[arg(long)]
    timesteps: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(ExitError::config("--workers must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let mut config = config::RunConfigFile::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    let ctx = commands::Context::new(config, cli.out, cli.seed);
    match cli.command {
        Command::Convert {
            input,
            output,
            bin_width_us,
            timesteps,
            clip_us,
        } => ctx.convert(&input, &output, bin_width_us, timesteps, clip_us),
        Command::Synth {
            classes,
            train_per_class,
            test_per_class,
            size,
            timesteps,
            bin_width_us,
        } => ctx.synth(spikesparse::event_io::SynthConfig {
            classes,
            train_per_class,
            test_per_class,
            height: size,
            width: size,
            timesteps,
            bin_width_us,
            seed: ctx.config.train.seed,
            ..spikesparse::event_io::SynthConfig::default()
        }),
        Command::Train => ctx.train(),
        Command::Eval(args) => ctx.eval(&args.into()),
        Command::Sparsity(args) => ctx.sparsity(&args.into()),
        Command::Anytime { eval, t_list } => ctx.anytime(&eval.into(), t_list),
        Command::StudyStride { seeds } => ctx.study_stride(seeds),
    }
}

impl From<EvalArgs> for commands::EvalTarget {
    fn from(args: EvalArgs) -> Self {
        commands::EvalTarget {
            checkpoint: args.checkpoint,
            data: args.data,
            split: match args.split {
                SplitArg::Train => spikesparse::event_io::Split::Train,
                SplitArg::Test => spikesparse::event_io::Split::Test,
            },
            timesteps: args.timesteps,
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
