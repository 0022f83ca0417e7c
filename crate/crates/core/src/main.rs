//! `upgd` command-line runner.
//!
//! Exit codes: 0 success, 2 some grid cells diverged, 1 configuration or I/O error.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use upgd::harness::{self, presets, HarnessError, Overrides};

#[derive(Parser)]
#[command(name = "upgd", version, about = "Continual-learning optimizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a (rule × step size × seed) sweep.
    Run {
        /// TOML config file (optional when --preset is given).
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Run the utility-quality probe.
    Probe {
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Recompute per-run aggregates of a finished sweep and print the best step sizes.
    Summarize { dir: PathBuf },
    /// List built-in presets.
    Presets,
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    preset: Option<String>,
    /// Number of seeds (0..N).
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            preset: a.preset,
            seeds: a.seeds,
            steps: a.steps,
            out: a.out,
            workers: a.workers,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn config(path: Option<&Path>, overrides: OverrideArgs) -> Result<harness::ExperimentConfig, HarnessError> {
    let overrides: Overrides = overrides.into();
    if path.is_none() && overrides.preset.is_none() {
        return Err(harness::ConfigError::Missing("config path or --preset").into());
    }
    Ok(harness::load(path, &overrides)?)
}

fn dispatch(command: Command) -> Result<ExitCode, HarnessError> {
    match command {
        Command::Run { config: path, overrides } => {
            let cfg = config(path.as_deref(), overrides)?;
            eprintln!(
                "{}: {} rules × {} step sizes × {} seeds, {} steps → {}",
                cfg.name,
                cfg.rules.len(),
                cfg.step_sizes.len(),
                cfg.seeds.len(),
                cfg.steps,
                cfg.out_dir.display()
            );
            let summary = harness::run_experiment(&cfg)?;
            print_best(&summary.best);
            let audit = summary.audit();
            if audit.checks > 0 {
                println!(
                    "scaling audit: {} checks, {} out of range, {} order violations",
                    audit.checks, audit.out_of_range, audit.order_violations
                );
            }
            let diverged = summary.diverged();
            if diverged > 0 {
                eprintln!("{diverged} of {} runs diverged", summary.cells.len());
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Probe { config: path, overrides } => {
            let cfg = config(path.as_deref(), overrides)?;
            let summary = harness::run_quality_probe(&cfg)?;
            let Some(first) = summary.runs.first() else {
                return Ok(ExitCode::SUCCESS);
            };
            let from = (cfg.steps / 10).max(1);
            println!("mean Spearman correlation with true utility, steps {from}..{}:", cfg.steps);
            for col in first.columns.iter().filter(|c| c.starts_with("global_")) {
                let means = summary.seed_means(col, from, cfg.steps);
                let avg = means.iter().sum::<f64>() / means.len().max(1) as f64;
                println!("  {:<24} {avg:+.4}", col.trim_start_matches("global_"));
            }
            println!("wrote {} probe CSVs to {}", summary.runs.len(), cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Summarize { dir } => {
            let s = harness::summarize(&dir)?;
            print_best(&s.best);
            if !s.mismatches.is_empty() {
                eprintln!("summary rows {:?} disagree with their run CSVs", s.mismatches);
                return Ok(ExitCode::from(1));
            }
            if s.cells.iter().any(|c| c.status.is_diverged()) {
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Presets => {
            for name in presets::NAMES {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_best(best: &[harness::runner::BestStepSize]) {
    println!("{:<28} {:>10} {:>16}", "rule", "step size", "mean score");
    for b in best {
        let step = b.step_size.map_or("-".to_string(), |s| format!("{s:e}"));
        println!("{:<28} {:>10} {:>16.6}", b.rule.to_string(), step, b.mean_score);
    }
}
