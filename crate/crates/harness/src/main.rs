use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use eeml_core::diffnet::Order;
use eeml_harness::{ExperimentConfig, HarnessError, Pipeline, Preset};

#[derive(Parser)]
#[command(name = "eeml", version, about = "Ensemble embedded meta-learning on toy regression")]
struct Cli {
    #[command(subcommand)]
    stage: Stage,

    /// JSON file whose keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Support points per task.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["5", "10"]))]
    shots: Option<String>,

    /// Meta-gradient order.
    #[arg(long, global = true)]
    order: Option<Order>,
}

#[derive(Subcommand, Clone, Copy)]
enum Stage {
    /// MAML pretraining of the clustering initialization.
    Pretrain,
    /// Cosine K-means over task gradient embeddings.
    Cluster,
    /// Train the per-cluster experts.
    Train,
    /// Evaluate the ensemble on held-out tasks.
    Eval,
    /// Evaluate plain MAML on the same tasks.
    Baseline,
    /// Every stage and the comparison.
    All,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let base = ExperimentConfig::preset(cli.preset);
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &base)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(shots) = &cli.shots {
        cfg.k_shot = shots.parse().expect("restricted by clap");
    }
    if let Some(order) = cli.order {
        cfg.order = order;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<(), HarnessError> {
    let Ok(raw) = std::env::var("EEML_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::Config(format!("EEML_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    configure_threads()?;
    let pipeline = Pipeline::new(resolve(cli)?)?;
    match cli.stage {
        Stage::Pretrain => pipeline.pretrain().map(drop),
        Stage::Cluster => pipeline.cluster().map(drop),
        Stage::Train => pipeline.train().map(drop),
        Stage::Eval => pipeline.eval().map(drop),
        Stage::Baseline => pipeline.baseline().map(drop),
        Stage::All => pipeline.all().map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
