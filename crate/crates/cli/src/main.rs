//! `odegrud` command-line interface.
//!
//! Exit codes: 0 success, 1 threshold failure, 2 usage or config error,
//! 3 runtime divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odegrud::models::{Imputation, ModelKind};
use odegrud::odesolver::{GradientMode, Method};
use odegrud::training::OptimizerKind;

use crate::config::{NameList, Pair, UsageError};

#[derive(Parser, Debug)]
#[command(
    name = "odegrud",
    version,
    about = "Continuous-time GRU-D classifiers for irregular series"
)]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides)
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, metrics and summary
    Train(TrainArgs),
    /// Score a checkpoint on a dataset
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on toy fixtures
    Gradcheck(GradcheckArgs),
    /// Time training epochs for every model kind
    Bench(BenchArgs),
    /// Write a synthetic dataset as triplet and label files
    Synth(SynthArgs),
}

/// Data source: files or a synthetic preset, never both.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Triplet file `series_id,time,variable,value` [default: none]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Label file `series_id,label` [default: none]
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Comma-separated variable vocabulary for --data [default: inferred, sorted]
    #[arg(long)]
    pub variables: Option<NameList>,
    /// Steps kept per loaded series [default: 200]
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Synthetic preset: default, informative, random, separable [default: none]
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Synthetic: number of series [default: from preset]
    #[arg(long)]
    pub n_series: Option<usize>,
    /// Synthetic: number of variables [default: from preset]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Synthetic: mean series length [default: from preset]
    #[arg(long)]
    pub mean_length: Option<usize>,
    /// Synthetic: per-class missing rates `negative,positive` [default: from preset]
    #[arg(long)]
    pub missing_rates: Option<Pair>,
    /// Synthetic: class-dependent drift amplitude [default: from preset]
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Synthetic: observation noise std [default: from preset]
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Model kind: gru, grud, ode_rnn, ode_grud, ext_ode_grud [default: ode_grud]
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Hidden state size [default: 16]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Input imputation for gru and ode_rnn: mean, forward, simple [default: mean]
    #[arg(long)]
    pub imputation: Option<Imputation>,
    /// ODE solver: euler, rk4 [default: rk4]
    #[arg(long)]
    pub solver: Option<Method>,
    /// Solver step size [default: median observation gap / 4]
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Gradient mode: discretize, adjoint [default: discretize]
    #[arg(long)]
    pub grad_mode: Option<GradientMode>,
    /// Time the hidden state evolves after the last observation [default: 0]
    #[arg(long)]
    pub readout_horizon: Option<f64>,
    /// Use the literal input-decay formula in ext_ode_grud [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub literal_input_decay: Option<bool>,
    /// Learning-rate multiplier of the filter-linear decay parameters [default: 1]
    #[arg(long)]
    pub filter_lr_mult: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct OptimArgs {
    /// Training epochs [default: 20]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 0.01]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer: adam, sgd [default: adam]
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// Epochs without validation improvement before stopping, 0 = never [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Validation share of the data [default: 0.2]
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Test share of the data [default: 0.2]
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file of `key = value` lines mirroring the long flags [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Seed for splits, initialization, shuffling and synthetic data [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: odegrud-run]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Process series one at a time instead of in parallel [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sequential: Option<bool>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config file of `key = value` lines mirroring the long flags [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed for synthetic data [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for scores.csv and eval.json [default: odegrud-eval]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Model kind, or `all`
    pub model: String,
    /// Fixture seed; fixtures `seed` and `seed + 1` are checked [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write gradcheck.json here [default: no file]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Workload size: quick, full [default: quick]
    #[arg(long, default_value = "quick")]
    pub suite: String,
    /// Timed epochs per model kind [default: 3]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Seed of the synthetic workload [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Process series one at a time instead of in parallel [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sequential: Option<bool>,
    /// Write bench.json here [default: no file]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Config file of `key = value` lines mirroring the long flags [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Generator seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for triplets.csv and labels.csv [default: odegrud-synth]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Maps an error chain to the exit-code contract.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<odegrud::Error>() {
            return core_code(e);
        }
        if cause.downcast_ref::<commands::ThresholdFailure>().is_some() {
            return 1;
        }
    }
    2
}

fn core_code(e: &odegrud::Error) -> u8 {
    use odegrud::Error as E;
    match e {
        E::Series { source, .. } => core_code(source),
        E::Divergence { .. } | E::NonFiniteGradient { .. } | E::DivergentLoss { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => commands::bench(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
