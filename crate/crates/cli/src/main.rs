//! Config-driven experiment runner: parses a declarative experiment file,
//! executes the named recipes, and emits one CSV per experiment plus a
//! human-readable summary with pass/fail against the declared tolerances.
//! Exit status is 0 iff every declared check passes.

mod config;
mod experiments;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use config::Config;
use experiments::{run_experiment, ExperimentOutput, RunCtx};

#[derive(Parser)]
#[command(name = "levy-bsde", about = "BSDE / Malliavin experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments declared in a config file.
    Run {
        config: PathBuf,
        /// Only run the named experiments (comma separated or repeated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run independent experiments concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Print the experiment plan of a config file.
    List { config: PathBuf },
    /// Print the config grammar.
    Schema,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(all_passed) => {
            if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Schema => {
            print!("{}", config::SCHEMA);
            Ok(true)
        }
        Command::List { config } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = Config::parse(&text)?;
            println!(
                "model: gamma={} sigma={} horizon={} components={}",
                cfg.model.gamma,
                cfg.model.sigma,
                cfg.model.horizon,
                cfg.model.jumps.len()
            );
            println!(
                "scheme: steps={} paths={} seed={} basis_degree={}",
                cfg.scheme.steps, cfg.scheme.paths, cfg.scheme.seed, cfg.scheme.basis_degree
            );
            println!("{} experiments:", cfg.experiments.len());
            for exp in &cfg.experiments {
                println!("  {} (kind {})", exp.name, exp.kind);
            }
            Ok(true)
        }
        Command::Run {
            config,
            only,
            out,
            parallel,
        } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = Config::parse(&text)?;
            let out_dir = out
                .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));

            let selected: Vec<&config::ExperimentCfg> = if only.is_empty() {
                cfg.experiments.iter().collect()
            } else {
                for name in &only {
                    if !cfg.experiments.iter().any(|e| &e.name == name) {
                        bail!("unknown experiment name '{name}'");
                    }
                }
                cfg.experiments
                    .iter()
                    .filter(|e| only.contains(&e.name))
                    .collect()
            };

            let ctx = RunCtx::from_config(&cfg)?;
            let outputs: Vec<ExperimentOutput> = if parallel {
                let results: Vec<Result<ExperimentOutput>> = selected
                    .par_iter()
                    .map(|exp| run_experiment(exp, &ctx))
                    .collect();
                results.into_iter().collect::<Result<_>>()?
            } else {
                selected
                    .iter()
                    .map(|exp| run_experiment(exp, &ctx))
                    .collect::<Result<_>>()?
            };

            let meta = report::RunMeta::new(cfg.scheme.seed, &text);
            let files = report::write_outputs(&outputs, &meta, &out_dir)?;
            for f in &files {
                println!("wrote {f}");
            }
            let all_passed = outputs.iter().all(|o| o.all_passed());
            let n_failed: usize = outputs
                .iter()
                .flat_map(|o| o.checks())
                .filter(|c| c.pass != Some(true))
                .count();
            if all_passed {
                println!("all checks passed");
            } else {
                println!("{n_failed} check(s) FAILED; see summary.txt");
            }
            Ok(all_passed)
        }
    }
}
