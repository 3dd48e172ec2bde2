use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use neicl::harness::{Framework, ModelVariant};
use neicl::runner::{cmd_analyze, cmd_pretrain, cmd_run, ExperimentConfig, Overrides};
use neicl::tasks::Formulation;
use neicl::Error;

const USAGE_ERROR: u8 = 2;
const FAILURE: u8 = 1;

/// Neighbor-attention continual learning experiments.
#[derive(Parser, Debug)]
#[command(name = "neicl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the base encoder and write its checkpoint and vocabulary.
    Pretrain(Common),
    /// Run every seed x framework x model cell and aggregate the results.
    Run(Common),
    /// Recall and drift reports for a finished run directory.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Run directory; defaults to the configured output directory.
        dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, env = "NEICL_CONFIG")]
    config: Option<PathBuf>,
    /// Seed; repeat for several runs.
    #[arg(long = "seed", env = "NEICL_SEED", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, env = "NEICL_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for independent cells.
    #[arg(long, env = "NEICL_JOBS", value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    /// vanilla, er, agem, mbpa, probing or mtl; repeatable.
    #[arg(long = "framework", env = "NEICL_FRAMEWORK", value_delimiter = ',')]
    frameworks: Vec<Framework>,
    /// ft, pretrained, neiattn or neireg; repeatable.
    #[arg(long = "model", env = "NEICL_MODEL", value_delimiter = ',')]
    models: Vec<ModelVariant>,
    #[arg(long, env = "NEICL_FORMULATION", value_parser = ["a", "b", "c"])]
    formulation: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref())?;
        let formulation = self.formulation.as_deref().map(str::parse::<Formulation>).transpose()?;
        cfg.apply(&Overrides {
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            jobs: self.jobs.map(|j| j as usize),
            frameworks: self.frameworks.clone(),
            models: self.models.clone(),
            formulation,
        });
        Ok(cfg)
    }
}

fn exit_for(e: &Error) -> ExitCode {
    error!("{e}");
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::Parse(_) => ExitCode::from(USAGE_ERROR),
        _ => ExitCode::from(FAILURE),
    }
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Pretrain(common) => {
            let mut cfg = common.resolve()?;
            if let Some(&seed) = common.seeds.first() {
                cfg.pretrain.seed = seed;
            }
            let report = cmd_pretrain(&cfg)?;
            println!(
                "held-out MLM top-5 accuracy {:.4} (chance {:.4}, {} positions)",
                report.heldout_top5, report.chance_top5, report.heldout_positions
            );
            println!("checkpoint {}", cfg.checkpoint_path().display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let summary = cmd_run(&cfg)?;
            print!("{}", neicl::runner::aggregate_csv(&summary.aggregate));
            for (id, msg) in &summary.failures {
                eprintln!("{id} failed: {msg}");
            }
            if summary.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("{} of {} cells failed", summary.failures.len(), summary.failures.len() + summary.records.len());
                Ok(ExitCode::from(FAILURE))
            }
        }
        Command::Analyze { common, dir } => {
            let dir = match dir {
                Some(d) => d,
                None => common.resolve()?.out,
            };
            let summary = cmd_analyze(&dir)?;
            for r in &summary.recall {
                println!("{} checkpoint {} recall {:.4}", r.run_id, r.checkpoint, r.recall);
            }
            println!("{} drift rows written to {}", summary.drift.len(), dir.join("analysis").display());
            if summary.skipped.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("{} checkpoints missing", summary.skipped.len());
                Ok(ExitCode::from(FAILURE))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("NEICL_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => exit_for(&e),
    }
}
