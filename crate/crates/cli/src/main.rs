//! `drivefusion`: generate → prep → train → predict → ensemble → eval → path → plot.

mod commands;
mod config;
mod stage;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drivefusion::dataset::Split;
use drivefusion::preprocess::ResolutionTier;

use config::BackboneChoice;

#[derive(Parser, Debug)]
#[command(
    name = "drivefusion",
    version,
    about = "Steering angle and speed prediction pipeline"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for generation, initialisation, shuffling and augmentation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Raw dataset root (default: config, then $DRIVEFUSION_DATA, then <out>/data).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Rerun a stage even when its outputs are current, replacing them.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TierArg {
    Full,
    S1,
    S2,
    S3,
}

impl From<TierArg> for ResolutionTier {
    fn from(t: TierArg) -> Self {
        match t {
            TierArg::Full => ResolutionTier::Full,
            TierArg::S1 => ResolutionTier::S1,
            TierArg::S2 => ResolutionTier::S2,
            TierArg::S3 => ResolutionTier::S3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum EnsembleMode {
    /// Training-prior weighted average.
    Weighted,
    /// Plain arithmetic mean.
    Mean,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic driving dataset.
    Gen {
        #[arg(long)]
        routes: Option<usize>,
        #[arg(long)]
        chapters: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Frame width in pixels (height follows 16:9).
        #[arg(long)]
        width: Option<u32>,
    },
    /// Resize and temporally subsample the dataset, fitting normalization statistics.
    Prep {
        #[arg(long, value_enum)]
        tier: Option<TierArg>,
        #[arg(long)]
        stride: Option<u32>,
    },
    /// Train a preset on the prepared dataset.
    Train {
        /// One of: model1, model1-r152, model1-sem20, model1-sem47, model2-single,
        /// model2-stacked, model2-sequence, model3.
        #[arg(long)]
        preset: Option<String>,
        /// Width multiplier for every layer.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, value_enum)]
        backbone: Option<BackboneChoice>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Predict a split with a checkpoint (default: the preset's last checkpoint).
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Combine aligned member prediction files.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        members: Vec<PathBuf>,
        /// Angle prior JSON; built from the training split when omitted.
        #[arg(long)]
        prior_angle: Option<PathBuf>,
        /// Speed prior JSON; built from the training split when omitted.
        #[arg(long)]
        prior_speed: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "weighted")]
        mode: EnsembleMode,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Overall and per-zone MSE of a prediction file against ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        /// Report JSON path (a text table is written beside it).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dead-reckon the driven path of one chapter of a prediction file.
    Path {
        #[arg(long)]
        input: PathBuf,
        /// Chapter to integrate (default: the first in the file).
        #[arg(long)]
        chapter: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render SVG figures.
    Plot {
        /// Prediction file: truth/prediction overlay and driven paths.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Training run directory: loss and validation curves.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Histogram of absolute training steering angles.
        #[arg(long)]
        histogram: bool,
        #[arg(long)]
        chapter: Option<String>,
        /// Output directory (default: <out>/plots).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Usage errors exit with 1, data and integrity errors with 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<drivefusion::Error>())
    {
        Some(e) if e.is_data_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
