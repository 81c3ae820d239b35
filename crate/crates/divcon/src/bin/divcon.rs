use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use divcon::config::ExperimentConfig;
use divcon::harness::{table1_csv, table2_csv, Pipeline, StageOutcome};

#[derive(Parser, Debug)]
#[command(name = "divcon", about = "Diverse, temporally consistent joint sampling on a toy latent video world")]
struct Cli {
    /// TOML experiment configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for data, checkpoints, runs and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generates the synthetic dataset
    GenData,
    /// Trains the flow-matching generator
    TrainFlow,
    /// Trains the embedders and the frame interpolator
    TrainLatent,
    /// Samples every method variant for each class and repetition
    Sample,
    /// Computes metrics and writes the report tables
    Evaluate,
    /// Runs every stage; finished stages with unchanged inputs are skipped.
    Experiment,
    /// Prints the tables of an evaluated output directory.
    Report,
    /// Writes the effective configuration as TOML.
    ShowConfig,
}

fn print_outcome(o: &StageOutcome) {
    let status = if o.skipped { "cached" } else { "done" };
    println!("{:<13} {status:<6} {}", o.stage, &o.key[..16]);
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut pipe = Pipeline::new(cfg, &cli.out)?;
    pipe.verbose = !cli.quiet;
    match cli.cmd {
        Cmd::GenData => print_outcome(&pipe.gen_data()?),
        Cmd::TrainFlow => print_outcome(&pipe.train_flow()?),
        Cmd::TrainLatent => print_outcome(&pipe.train_latent()?),
        Cmd::Sample => print_outcome(&pipe.sample()?),
        Cmd::Evaluate => {
            let report = pipe.evaluate()?;
            print!("{}\n{}", table1_csv(&report), table2_csv(&report));
        }
        Cmd::Experiment => {
            let (stages, report) = pipe.run_experiment()?;
            stages.iter().for_each(print_outcome);
            print!("{}\n{}", table1_csv(&report), table2_csv(&report));
        }
        Cmd::Report => {
            let report = pipe.load_report().context("report: run `evaluate` first")?;
            print!("{}\n{}", table1_csv(&report), table2_csv(&report));
            for row in pipe.load_latent_eval().unwrap_or_default() {
                println!(
                    "{},{},{:.6},{},{:.6}",
                    row.flow_step, row.metric_name, row.model_value, row.baseline_name, row.baseline_value
                );
            }
        }
        Cmd::ShowConfig => print!("{}", pipe.cfg.to_toml_string()),
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
