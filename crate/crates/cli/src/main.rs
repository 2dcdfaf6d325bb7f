use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use crowdtemp_cli::{run_stage, Context, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(
    name = "crowdtemp",
    version,
    about = "Crowdsourced phone thermometry experiments"
)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded execution for byte-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phone corpus and role table.
    Synth,
    /// Train one estimator per contributor.
    TrainEstimators,
    /// Train the pairwise aggregator.
    TrainCbts,
    /// Compare truth-inference methods by group size.
    TruthinfBench,
    /// Crowd-label the participants' training data.
    GenLabels,
    /// Meta-train and compare few-shot strategies.
    Fewshot,
    /// Federated meta-training with encrypted aggregation.
    Fed,
    /// Combine every stage table into report.md.
    Report,
    /// Run every stage in order.
    All,
    /// Print the resolved config as TOML.
    ShowConfig,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::Synth => vec![Stage::Synth],
            Command::TrainEstimators => vec![Stage::TrainEstimators],
            Command::TrainCbts => vec![Stage::TrainCbts],
            Command::TruthinfBench => vec![Stage::TruthinfBench],
            Command::GenLabels => vec![Stage::GenLabels],
            Command::Fewshot => vec![Stage::Fewshot],
            Command::Fed => vec![Stage::Fed],
            Command::Report => vec![Stage::Report],
            Command::All => Stage::ALL.to_vec(),
            Command::ShowConfig => Vec::new(),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = cli.out {
        config.output_dir = o;
    }
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let ctx = Context::new(config, cli.deterministic)?;
    for stage in cli.command.stages() {
        let t = Instant::now();
        run_stage(&ctx, stage)?;
        eprintln!("{stage}: done in {:.1} s", t.elapsed().as_secs_f64());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
