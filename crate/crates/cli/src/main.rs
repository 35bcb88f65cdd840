//! `dnetreg`: simulate, fit and analyze populations of dynamic networks.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dnetreg", version, about = "Dynamic network response regression")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// error, warn, info, debug or trace. RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a population from the model and write it as a dataset directory.
    Simulate(SimulateArgs),
    /// Fit the model at one (rank, lambda).
    Fit(FitArgs),
    /// Choose (rank, lambda) by eBIC over a grid.
    Tune(TuneArgs),
    /// Per-edge, per-time GLM baseline with p-values.
    Edgereg(EdgeregArgs),
    /// Per-edge GLM on the spline basis.
    Dedgereg(DedgeregArgs),
    /// Repeated simulation study comparing the estimators.
    Bench(BenchArgs),
    /// Build binary dynamic networks from regional signals.
    Netconstruct(NetconstructArgs),
    /// Community detection on an averaged connectivity matrix.
    Cluster(ClusterArgs),
    /// Two-group permutation comparison of slope tensors.
    Permute(PermuteArgs),
}

#[derive(Debug, Args)]
pub struct FitFlags {
    /// JSON file with fit options; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    /// Spline basis dimension K.
    #[arg(long = "K", alias = "basis-dim")]
    basis_dim: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    max_outer_iters: Option<usize>,
    #[arg(long)]
    outer_tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "N")]
    subjects: Option<usize>,
    #[arg(long = "T")]
    times: Option<usize>,
    #[arg(long = "K")]
    basis_dim: Option<usize>,
    #[arg(long = "R")]
    rank: Option<usize>,
    #[arg(long)]
    s0: Option<f64>,
    #[arg(long = "p")]
    covariates: Option<usize>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated candidate ranks.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    ranks: Vec<usize>,
    /// Comma-separated explicit lambda values; overrides the relative grid.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    n_lambda: usize,
    #[arg(long, default_value_t = 0.05)]
    min_ratio: f64,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EdgeregArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    family: Option<String>,
    /// bonferroni or bh.
    #[arg(long, default_value = "bonferroni")]
    correction: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DedgeregArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON study config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of EdgeReg, DEdgeReg, DNetReg.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Directory for bench.csv and bench.json; without it the CSV goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NetconstructArgs {
    /// Signal files (`.csv` or raw binary) or directories holding them.
    #[arg(long, required = true, num_args = 1..)]
    signals: Vec<PathBuf>,
    /// N × p covariates with a header row, one row per signal in name order.
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Symmetric n × n matrix as headerless CSV.
    #[arg(long, conflicts_with = "fit")]
    matrix: Option<PathBuf>,
    /// Output directory of `fit` or `tune`; the baseline is summed over the
    /// time grid of `--data`.
    #[arg(long, requires = "data")]
    fit: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Defaults to the fitted rank.
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PermuteArgs {
    #[arg(long)]
    data: PathBuf,
    /// One 0/1 group label per subject, single column with a header row.
    #[arg(long, conflicts_with = "group_covariate")]
    groups: Option<PathBuf>,
    /// Use a two-valued covariate column as the group label.
    #[arg(long)]
    group_covariate: Option<usize>,
    /// JSON file with permutation options; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_perm: Option<usize>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    covariate: Option<usize>,
    /// Fixed rank; with --lambda skips tuning on the observed split.
    #[arg(long, requires = "lambda")]
    rank: Option<usize>,
    #[arg(long, requires = "rank")]
    lambda: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    n_lambda: usize,
    #[arg(long, default_value_t = 0.05)]
    min_ratio: f64,
    /// JSON list of graphs of interest.
    #[arg(long)]
    goi: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// A problem with how the tool was invoked rather than with the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// The error chain joined by `: `, skipping causes their parent already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .parse_env("RUST_LOG")
        .target(env_logger::Target::Stderr)
        .init();

    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Tune(a) => commands::tune(a),
        Command::Edgereg(a) => commands::edgereg(a),
        Command::Dedgereg(a) => commands::dedgereg(a),
        Command::Bench(a) => commands::bench(a),
        Command::Netconstruct(a) => commands::netconstruct(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Permute(a) => commands::permute(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
