use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use radaug_cli::commands::{self, Outcome};
use radaug_cli::{CliError, ExperimentConfig};
use radaug_core::perturb::{Method, PerturberConfig};

#[derive(Parser, Debug)]
#[command(name = "radaug", version, about = "Adversarial augmentation experiments for camera pose regression")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, replacing every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training perturbation method: rada, fgsm, fgm, gaussian or none.
    #[arg(long, global = true)]
    perturber: Option<Method>,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the train and test splits to disk.
    GenData,
    /// Train a model and write checkpoints, audit log and report.
    Train {
        /// Dataset directory, or a gen-data run containing train/.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory, or a gen-data run containing test/.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Perturbation histograms and landmark concentration per method.
    Histogram {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated methods, each at its preset settings.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// Train and evaluate the threshold/clip ablation variants.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Cross-weather mixing study.
    Mixing,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    commands::resolve_config(path, cli.seed, cli.perturber, &cli.overrides)
}

fn dispatch(cli: &Cli) -> Result<Outcome, CliError> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::GenData => commands::cmd_gen_data(&load(cli)?, out),
        Command::Train { data } => commands::cmd_train(&load(cli)?, data.as_deref(), out),
        Command::Eval { checkpoint, data } => {
            let cfg = match &cli.config {
                Some(_) => Some(load(cli)?),
                None => None,
            };
            commands::cmd_eval(cfg.as_ref(), checkpoint, data.as_deref(), out)
        }
        Command::Histogram {
            checkpoint,
            data,
            methods,
        } => {
            let mut cfg = load(cli)?;
            if let Some(ms) = methods {
                cfg.analysis.methods = ms
                    .iter()
                    .map(|&m| PerturberConfig {
                        seed: cfg.train.perturber.seed,
                        ..PerturberConfig::preset(m)
                    })
                    .collect();
            }
            commands::cmd_histogram(&cfg, checkpoint, data.as_deref(), out)
        }
        Command::Ablate { data } => commands::cmd_ablate(&load(cli)?, data.as_deref(), out),
        Command::Mixing => commands::cmd_mixing(&load(cli)?, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("run directory: {}", display(&outcome.run_dir));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
