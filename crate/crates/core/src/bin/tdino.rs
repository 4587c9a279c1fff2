use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use tdino::downstream::Protocol;
use tdino::harness::{self, ExperimentConfig, HarnessError, Workspace};

#[derive(Parser)]
#[command(name = "tdino", version, about = "Future-past self-distillation experiments on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides TDINO_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the student and write checkpoint and training log per seed.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train downstream heads and append metrics rows.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint; defaults to the workspace location for the seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A single protocol instead of the configured set.
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Evaluate a fine-tuned checkpoint on the test split and print the result as JSON.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the configured grid; cells with existing metrics rows are skipped.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Build tables and loss-curve plots from the workspace metrics.
    Report {
        /// Configuration used to locate the workspace.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Workspace root (overrides TDINO_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics CSV; defaults to the workspace metrics file.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn seeds(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map(|s| vec![s]).unwrap_or_else(|| cfg.experiment.seeds.clone())
}

fn load(common: &Common) -> Result<(ExperimentConfig, Workspace), HarnessError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let ws = Workspace::resolve(common.out.as_deref(), &cfg);
    Ok((cfg, ws))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Pretrain { common } => {
            let (cfg, ws) = load(&common)?;
            let splits = harness::prepare_dataset(&cfg, &ws)?;
            for seed in seeds(&cfg, common.seed) {
                let art = harness::run_pretrain(&cfg, &ws, &splits.train, seed)?;
                println!("{}", art.checkpoint.display());
            }
        }
        Command::Finetune { common, checkpoint, protocol } => {
            let (cfg, ws) = load(&common)?;
            let protocols = match protocol {
                Some(p) => vec![p.parse::<Protocol>().map_err(|e| HarnessError::Config(e.to_string()))?],
                None => cfg.downstream.protocols.clone(),
            };
            let splits = harness::prepare_dataset(&cfg, &ws)?;
            for seed in seeds(&cfg, common.seed) {
                for row in harness::run_finetune(&cfg, &ws, &splits, &protocols, checkpoint.as_deref(), seed)? {
                    println!("{} seed {}: {}", row.protocol, row.seed, row.macro_precision);
                }
            }
        }
        Command::Evaluate { common, checkpoint } => {
            let (cfg, ws) = load(&common)?;
            let splits = harness::prepare_dataset(&cfg, &ws)?;
            let result = harness::run_evaluate(&cfg, &splits, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
        }
        Command::Ablate { common } => {
            let (mut cfg, ws) = load(&common)?;
            if let Some(s) = common.seed {
                cfg.experiment.seeds = vec![s];
            }
            let summary = harness::run_ablate(&cfg, &ws)?;
            println!("ran {} cells, skipped {}", summary.ran, summary.skipped);
        }
        Command::Report { config, out, metrics } => {
            let cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let ws = Workspace::resolve(out.as_deref(), &cfg);
            let metrics = metrics.unwrap_or_else(|| ws.metrics_path(cfg.downstream.task));
            if !metrics.exists() {
                return Err(HarnessError::MissingFile(metrics.display().to_string()));
            }
            harness::run_report(&metrics, &ws.root.join("logs"), &ws.report_dir())?;
            println!("{}", ws.report_dir().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
