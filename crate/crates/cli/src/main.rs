use std::path::PathBuf;
use std::process::ExitCode;

use reidpatch::attack::AttackMode;
use reidpatch_cli::{run_experiment, CliError, ExperimentConfig, Overrides, Stage};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "reidpatch", version, about = "Adversarial pattern generation and re-identification evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Attack mode: evade or impersonate.
    #[arg(long, global = true)]
    mode: Option<AttackMode>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Identity to impersonate.
    #[arg(long, global = true)]
    target: Option<u32>,

    /// Last stage for `run`: dataset, model, genset, attack, evaluate or report.
    #[arg(long, global = true)]
    stage: Option<Stage>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate or ingest the dataset.
    MakeDataset,
    /// Train the re-identification model (or adopt a checkpoint).
    TrainModel,
    /// Build the adversary's generating set.
    BuildGenset,
    /// Optimise the adversarial pattern.
    Attack,
    /// Evaluate clean and attacked retrieval.
    Evaluate,
    /// Collect the report bundle.
    Report,
    /// Run the full pipeline.
    Run,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::MakeDataset => Stage::Dataset,
            Command::TrainModel => Stage::Model,
            Command::BuildGenset => Stage::Genset,
            Command::Attack => Stage::Attack,
            Command::Evaluate => Stage::Evaluate,
            Command::Report | Command::Run => Stage::Report,
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let last = match (cli.command, cli.stage) {
        (Command::Run, Some(s)) => s,
        (_, Some(_)) => return Err(CliError::Config("--stage only applies to `run`".into())),
        (c, None) => c.stage(),
    };
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        mode: cli.mode,
        output_dir: cli.out.clone(),
        target: cli.target,
    });
    let summary = run_experiment(&cfg, last)?;
    for r in &summary.stages {
        println!(
            "{:<9} {} {}",
            r.stage.name(),
            if r.cached { "cached  " } else { "computed" },
            &r.content_hash[..16]
        );
    }
    if let (Some(table), true) = (&summary.table, last >= Stage::Evaluate) {
        print!("{}", table.to_text());
    }
    println!("artifacts in {}", summary.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
