use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svil_core::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "svil", version, about = "Style-jittered meta-learning for synthetic person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the experiment described by a config file.
    Run { config: PathBuf },
    /// Run every combination of the given toggles.
    Ablate {
        config: PathBuf,
        /// Toggle names: sjm, maml, loss, weight_mode, cross_domain, sjm_stage.
        #[arg(long, num_args = 0.., value_delimiter = ',')]
        toggles: Vec<String>,
    },
    /// Write the configured dataset as a snapshot.
    DumpDataset { config: PathBuf },
    /// Evaluate a checkpoint on a dataset snapshot.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Domain to evaluate on (default: last).
        #[arg(long)]
        domain: Option<usize>,
    },
}

fn load(path: &PathBuf) -> svil_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    Ok(cfg)
}

fn dispatch(cmd: Command) -> svil_core::Result<()> {
    match cmd {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let report = experiment::run(&cfg)?;
            for r in &report.runs {
                println!("{}\tmAP {:.4}\trank1 {:.4}", r.name, r.eval.map, r.eval.rank(1));
            }
            if let Some(c) = &report.comparison {
                println!("{} - {}\tmAP {:+.4}", c.candidate, c.baseline, c.map_delta);
            }
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Ablate { config, toggles } => {
            let cfg = load(&config)?;
            let report = experiment::ablate(&cfg, &toggles)?;
            for r in &report.runs {
                println!("{}\tmAP {:.4}\trank1 {:.4}", r.name, r.eval.map, r.eval.rank(1));
            }
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::DumpDataset { config } => {
            let cfg = load(&config)?;
            let stem = experiment::dump_dataset(&cfg)?;
            println!("{}", stem.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            domain,
        } => {
            let result = experiment::eval_checkpoint(&checkpoint, &dataset, domain)?;
            println!("{}", serde_json::to_string(&result)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
