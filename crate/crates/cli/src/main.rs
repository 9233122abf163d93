use std::path::PathBuf;
use std::process::ExitCode;

use cfdialog_cli::pipeline::{run_all, run_stage, Outcome, Run, Stage};
use cfdialog_cli::{CliError, ExperimentConfig};
use clap::{Parser, Subcommand};

/// Counterfactual dialogue-policy experiments on a synthetic world.
#[derive(Parser, Debug)]
#[command(name = "cfdialog", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "stage-override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace stage directories produced by a different config.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate synthetic dialogues from a ground-truth world.
    GenWorld,
    /// Train the trait regressor and write regression and CCA tables.
    TrainDppr,
    /// Train the transition model.
    TrainBicogan,
    /// Build the pool of counterfactual databases.
    GenCf,
    /// Train the reward model and select balanced databases.
    TrainReward,
    /// Train the dueling double DQN over the selected databases.
    TrainPolicy,
    /// Greedy evaluation of the trained policy.
    Evaluate,
    /// Assemble the report bundle from completed stages.
    Report,
    /// Every stage in order.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenWorld => Stage::GenWorld,
            Command::TrainDppr => Stage::TrainDppr,
            Command::TrainBicogan => Stage::TrainBicogan,
            Command::GenCf => Stage::GenCf,
            Command::TrainReward => Stage::TrainReward,
            Command::TrainPolicy => Stage::TrainPolicy,
            Command::Evaluate => Stage::Evaluate,
            Command::Report => Stage::Report,
            Command::All => return None,
        })
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml("", &overrides)?,
    };
    let run = Run::new(&cli.out, &config, cli.force);
    let done = match cli.command.stage() {
        Some(stage) => vec![(stage, run_stage(&run, stage)?)],
        None => run_all(&run)?,
    };
    for (stage, outcome) in done {
        let status = match outcome {
            Outcome::Ran => "done",
            Outcome::UpToDate => "up to date",
        };
        println!("{:<14} {status} ({})", stage.name(), run.stage_dir(stage).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Validation(msg) => eprintln!("error: {msg}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
