use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use trajattn::harness::{configure_threads, Experiment};
use trajattn::model::Variant;

/// Trajectory-constrained attention experiments.
#[derive(Parser)]
#[command(name = "trajattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training world and its test counterpart.
    GenWorld {
        #[command(flatten)]
        common: Common,
        /// World seed; defaults to world.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Collect an off-policy dataset in a world.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
        /// Collection seed; defaults to evaluation.collect_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant and write a checkpoint and metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Training seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-head accuracy of each checkpoint on each dataset.
    EvalOffline {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, required = true)]
        dataset: Vec<PathBuf>,
    },
    /// Closed-loop episodes for each checkpoint and a random policy.
    EvalOnpolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, required = true)]
        world: Vec<PathBuf>,
    },
    /// Attention overlays for one dataset sample.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Sample index in the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Full toy comparison of all variants over the configured seeds.
    ReproduceToy {
        #[command(flatten)]
        common: Common,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn experiment(common: &Common) -> Result<Experiment> {
    Ok(Experiment::load(common.config.as_deref())?)
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenWorld { common, seed } => report(&experiment(&common)?.cmd_gen_world(seed, &common.out)?),
        Command::Collect { common, world, seed } => {
            report(&experiment(&common)?.cmd_collect(&world, seed, &common.out)?)
        }
        Command::Train { common, dataset, variant, seed } => {
            report(&experiment(&common)?.cmd_train(&dataset, variant, seed, &common.out)?)
        }
        Command::EvalOffline { common, checkpoint, dataset } => {
            let (paths, rows) = experiment(&common)?.cmd_eval_offline(&checkpoint, &dataset, &common.out)?;
            println!("{:<16}{:>6}  {:<20}{:<12}{:<12}{:<10}{:>10}", "variant", "seed", "dataset", "split", "head", "metric", "value");
            for r in &rows {
                println!(
                    "{:<16}{:>6}  {:<20}{:<12}{:<12}{:<10}{:>10.4}",
                    r.variant, r.seed, r.dataset, r.split, r.head, r.metric, r.value
                );
            }
            report(&paths);
        }
        Command::EvalOnpolicy { common, checkpoint, world } => {
            let (paths, summary) = experiment(&common)?.cmd_eval_onpolicy(&checkpoint, &world, &common.out)?;
            println!("{:<20}{:<16}{:>6}{:>14}{:>12}{:>12}", "world", "policy", "seed", "mean return", "std", "completion");
            for s in &summary {
                let seed = s.model_seed.map_or("-".into(), |v| v.to_string());
                println!(
                    "{:<20}{:<16}{:>6}{:>14.1}{:>12.1}{:>12.2}",
                    s.world, s.policy, seed, s.mean_return, s.std_return, s.mean_completion
                );
            }
            report(&paths);
        }
        Command::ExportAttention { common, checkpoint, dataset, sample } => {
            report(&experiment(&common)?.cmd_export_attention(&checkpoint, &dataset, sample, &common.out)?)
        }
        Command::ReproduceToy { common, seed } => {
            let mut exp = experiment(&common)?;
            if let Some(s) = seed {
                exp.config.seeds = vec![s];
                exp = Experiment::new(exp.config).context("single-seed config")?;
            }
            let report = exp.reproduce_toy(Some(&common.out), &mut |line| eprintln!("{line}"))?;
            print!("{}", report.table());
            println!("wrote {}", common.out.join("toy_summary.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format_chain(&e));
            ExitCode::FAILURE
        }
    }
}

fn format_chain(e: &anyhow::Error) -> String {
    e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ")
}
