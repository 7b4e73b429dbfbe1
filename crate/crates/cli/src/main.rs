//! `bgcl`: synthetic data, training, embedding sampling, classification and
//! uncertainty evaluation.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use bgcl::downstream::EmbedMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bgcl", version, about = "Bayesian graph contrastive learning")]
struct Cli {
    /// Worker threads for embedding sampling.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Bayesian,
    Deterministic,
}

impl From<Mode> for EmbedMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Bayesian => EmbedMode::Bayesian,
            Mode::Deterministic => EmbedMode::Deterministic,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a stochastic-block-model graph.
    Synth(SynthArgs),
    /// Train an encoder and its augmentation posteriors.
    Train(TrainArgs),
    /// Draw embedding samples from a checkpoint.
    Embed(EmbedArgs),
    /// Fit and apply the Monte-Carlo logistic-regression classifier.
    Classify(ClassifyArgs),
    /// PAVPU over the certainty-threshold sweep.
    Pavpu(PavpuArgs),
    /// ASTD differences by hop distance from noise-injected nodes.
    Astd(AstdArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    blocks: usize,
    #[arg(long)]
    nodes_per_block: usize,
    #[arg(long)]
    p_in: f64,
    #[arg(long)]
    p_out: f64,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 2.0)]
    signal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = Mode::Bayesian)]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Embedding samples drawn; the first `k` train the classifier.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Mixture size.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Mode::Bayesian)]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PavpuArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AstdArgs {
    /// Model trained on the clean graph.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clean graph directory.
    #[arg(long)]
    data: PathBuf,
    /// Configuration for training the model on the noisy graph.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 10)]
    noise_nodes: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    k_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BGCL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(1);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
