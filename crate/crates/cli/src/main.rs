mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "geoflow", version, about = "Topology-aware sample reweighting for node classification")]
struct Cli {
    /// Leave the `run_started` timestamp and wall-clock timings out of outputs.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train one model and write its report.
    Train(TrainArgs),
    /// Run the inner flow on fixed per-node losses.
    Flow(FlowArgs),
    /// Train over a grid of inner step counts and entropy weights.
    Sweep(TrainArgs),
    /// Score saved parameters on a dataset split.
    Eval(EvalArgs),
    /// Run the oracle battery.
    Check(CheckArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Covariate,
    Concept,
    Imbalance,
}

#[derive(clap::Args)]
pub struct GenerateArgs {
    #[arg(value_enum)]
    pub(crate) kind: GenKind,
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,
    /// Nodes per domain (train, validation, test).
    #[arg(long, default_value_t = 200)]
    pub(crate) n: usize,
    /// Feature dims (causal dims for `concept`).
    #[arg(long, default_value_t = 2)]
    pub(crate) d: usize,
    #[arg(long, default_value_t = 2)]
    pub(crate) classes: usize,
    /// Covariate shift magnitude.
    #[arg(long, default_value_t = 1.0)]
    pub(crate) shift: f64,
    /// Probability that the spurious dim agrees with the label in training.
    #[arg(long, default_value_t = 0.9)]
    pub(crate) spurious: f64,
    /// Majority to minority training count ratio for `imbalance`.
    #[arg(long, default_value_t = 100.0)]
    pub(crate) ratio: f64,
    /// Existing dataset to subsample for `imbalance`; a balanced covariate
    /// dataset is generated when absent.
    #[arg(long)]
    pub(crate) base: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub(crate) k_nn: usize,
    #[arg(long, default_value_t = 0.01)]
    pub(crate) cross_p: f64,
    #[arg(long, default_value_t = 2.0)]
    pub(crate) class_sep: f64,
    #[arg(long, default_value_t = 0.1)]
    pub(crate) spurious_noise: f64,
    #[arg(long)]
    pub(crate) out: PathBuf,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// JSON config file; flags override its keys.
    #[arg(short, long)]
    pub(crate) config: Option<PathBuf>,
    #[command(flatten)]
    pub(crate) run: RunConfig,
}

#[derive(clap::Args)]
pub struct FlowArgs {
    #[arg(long)]
    pub(crate) dataset: PathBuf,
    /// Classifier parameters; losses are their per-node cross-entropy.
    #[arg(long, conflicts_with = "loss_file", required_unless_present = "loss_file")]
    pub(crate) params: Option<PathBuf>,
    /// CSV with header `node_id,loss` and one row per node.
    #[arg(long)]
    pub(crate) loss_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub(crate) beta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub(crate) tau: f64,
    #[arg(long, default_value_t = 10)]
    pub(crate) t_in: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub(crate) positivity_floor: f64,
    #[arg(long, default_value_t = 40)]
    pub(crate) max_step_shrinks: u32,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub(crate) clamp_on_exhaustion: bool,
    /// Propagation hops used with `--params`.
    #[arg(long, default_value_t = 2)]
    pub(crate) hops: usize,
    #[arg(long, default_value_t = 1.0)]
    pub(crate) self_loop_weight: f64,
    /// Write the density every k steps (the final step is always written).
    #[arg(long, default_value_t = 1)]
    pub(crate) trace_every: usize,
    /// Accepted for interface uniformity; the flow itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,
    #[arg(long)]
    pub(crate) out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub(crate) dataset: PathBuf,
    #[arg(long)]
    pub(crate) params: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub(crate) split: Split,
    #[arg(long, default_value_t = 2)]
    pub(crate) hops: usize,
    #[arg(long, default_value_t = 1.0)]
    pub(crate) self_loop_weight: f64,
    /// Accepted for interface uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,
    /// Also write `eval.json` here.
    #[arg(long)]
    pub(crate) out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct CheckArgs {
    #[arg(default_value = "all", value_parser = clap::builder::PossibleValuesParser::new(geoflow::oracle::CheckSelector::NAMES))]
    pub(crate) selector: String,
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,
    /// Also write `check.json` here.
    #[arg(long)]
    pub(crate) out: Option<PathBuf>,
    #[arg(long, hide = true, value_parser = ["flip-velocity-sign"])]
    pub(crate) inject_fault: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GEOFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    let stamp = !cli.no_timestamps;
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a, stamp),
        Command::Flow(a) => commands::flow(&a, stamp),
        Command::Sweep(a) => commands::sweep(&a, stamp),
        Command::Eval(a) => commands::eval(&a),
        Command::Check(a) => commands::check(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
