use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "budgetcomm",
    version,
    about = "Budget-constrained multi-agent communication experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per seed.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint, printed as JSON.
    Evaluate(EvaluateArgs),
    /// Exact no-communication ceiling of a small traffic junction.
    Oracle(OracleArgs),
    /// Train and evaluate every cell of a parameter grid.
    Sweep(SweepArgs),
    /// CSV tables and SVG plots from run directories.
    Report(ReportArgs),
}

/// Flags shared by the commands that build an experiment config.
#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// Experiment config (JSON); defaults to the environment preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Set one config field, e.g. `budget.b=0.3`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run only this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["tj-easy", "tj-medium", "pp-5x5", "pp-10x10"])]
    pub env: Option<String>,
    #[arg(long, value_parser = ["fixed-cts", "fixed-proto", "gated-cts", "gated-proto", "enforcer"])]
    pub mode: Option<String>,
    /// Communication budget b.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long, value_parser = ["none", "commmax", "soft", "hard"], ignore_case = true)]
    pub enforcer: Option<String>,
    /// Output root; runs land in `<out>/<run name>/seed-<n>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value = "tj-easy", value_parser = ["tj-easy", "tj-medium"])]
    pub env: String,
    /// Oracle config (JSON); overrides --env and --history.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Past observations each car remembers.
    #[arg(long, default_value_t = 0)]
    pub history: usize,
    #[arg(long)]
    pub max_joint_plans: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// One grid axis, e.g. `budget.b=0.9,0.7,0.5`. Repeat for a cross product.
    #[arg(long = "grid", value_name = "KEY=V1,V2,...", required = true)]
    pub grid: Vec<String>,
    /// Evaluation episodes per trained seed.
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, metrics files, or roots searched for metrics.jsonl.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}
