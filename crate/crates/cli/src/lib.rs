//! Experiment runner for learn2help: config parsing, subcommand dispatch,
//! seeding and artifact output.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "learn2help",
    version,
    about = "Train and evaluate a rejector/expert pair that helps a frozen client"
)]
pub struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Experiment seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample the synthetic train/test CSVs.
    GenData,
    /// Pre-train the client, jointly train rejector and expert, write checkpoints.
    Train,
    /// Evaluate the saved checkpoints on both splits.
    Eval,
    /// One joint run per deferral cost.
    Sweep,
    /// Coverage/accuracy curves for all methods.
    Compare,
    /// Calibration sign-consistency grid and risk-gap slope.
    Verify,
}

impl Cli {
    /// The effective config: file (or defaults) with flag overrides applied.
    pub fn resolve_config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one subcommand, printing a short summary to stdout.
pub fn run(command: Command, cfg: &ExperimentConfig) -> CliResult<()> {
    let dir = cfg.out_dir.display();
    match command {
        Command::GenData => {
            let data = commands::cmd_gen_data(cfg)?;
            println!(
                "wrote {dir}/{} ({} rows) and {dir}/{} ({} rows)",
                commands::TRAIN_CSV,
                data.train.len(),
                commands::TEST_CSV,
                data.test.len()
            );
        }
        Command::Train => {
            let t = commands::cmd_train(cfg)?;
            if let Some(last) = t.log.last() {
                println!(
                    "epoch {}: mean surrogate {:.6}, train risk {:.6}, coverage {:.4}",
                    last.epoch, last.mean_surrogate, last.train_risk, last.coverage
                );
            }
            println!("wrote checkpoints and {} to {dir}", commands::TRAIN_LOG_CSV);
        }
        Command::Eval => {
            let e = commands::cmd_eval(cfg)?;
            for (split, r) in [("train", &e.train), ("test", &e.test)] {
                println!(
                    "{split}: accuracy {:.4}, coverage {:.4}, risk {:.4}",
                    r.accuracy, r.coverage, r.generalized_risk
                );
            }
            if let Some(gap) = e.deferred_gap {
                println!("expert - client accuracy on deferred test samples: {gap:.4}");
            }
        }
        Command::Sweep => {
            for r in commands::cmd_sweep(cfg)? {
                println!(
                    "ce {}: accuracy {:.4}, coverage {:.4}",
                    r.ce, r.report.accuracy, r.report.coverage
                );
            }
        }
        Command::Compare => {
            let c = commands::cmd_compare(cfg)?;
            println!(
                "client accuracy {:.4}, expert-alone accuracy {:.4}; {} curve points in {dir}/{}",
                c.client_accuracy,
                c.expert_alone_accuracy,
                c.curves.len(),
                commands::CURVES_CSV
            );
        }
        Command::Verify => {
            let v = commands::cmd_verify(cfg)?;
            let checked = v.grid.iter().filter(|r| !r.boundary).count();
            println!(
                "sign consistency: {} of {checked} checked grid points violate",
                v.violations.len()
            );
            if let Some(s) = &v.slope {
                println!("risk-gap slope: {:.4}", s.slope);
            }
            if let Some(reason) = v.failure() {
                return Err(CliError::Verification(reason));
            }
        }
    }
    Ok(())
}
