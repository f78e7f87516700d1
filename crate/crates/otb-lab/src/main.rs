//! `otb-lab`: verify the oracle identities, compare baselines, train a toy
//! policy, or replay a trajectory log.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use otb_lab::config::ExperimentConfig;
use otb_lab::{cmd_compare, cmd_replay, cmd_train, cmd_verify};

#[derive(Parser)]
#[command(
    name = "otb-lab",
    about = "Desk-scale laboratory for token-level policy-gradient baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON). Defaults to the built-in desk instance.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: csv or csv+svg (overrides the config).
    #[arg(long, value_parser = ["csv", "csv+svg"])]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every oracle invariant and write a pass/fail report.
    Verify(CommonArgs),
    /// Exact objective, exact variance, and Monte-Carlo noise per baseline.
    Compare(CommonArgs),
    /// On-policy training with the configured estimator.
    Train(CommonArgs),
    /// Recompute advantages from a recorded trajectory log.
    Replay {
        /// Trajectory log (one JSON object per line).
        #[arg(long)]
        log: PathBuf,
        /// Baseline kind to apply.
        #[arg(long)]
        baseline: String,
        /// Truncation threshold for the otb_tis kind.
        #[arg(long, default_value_t = 2.0)]
        clip: f64,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_path(path)
            .with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default_desk(),
    };
    if let Some(seed) = args.seed {
        config.run.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        config.output.dir = out.display().to_string();
    }
    if let Some(format) = &args.format {
        config.output.format = format.clone();
    }
    config.validate()?;
    Ok(config)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Verify(args) => {
            let config = load_config(&args)?;
            let (outcome, files) = cmd_verify(&config)?;
            let failed: Vec<_> = outcome.checks.iter().filter(|c| !c.pass).collect();
            for c in &outcome.checks {
                println!(
                    "[{}] seed {} {} (residual {:.3e})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.seed,
                    c.name,
                    c.residual
                );
            }
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            if failed.is_empty() {
                println!("verify: all {} checks passed", outcome.checks.len());
                Ok(ExitCode::SUCCESS)
            } else {
                println!(
                    "verify: {} of {} checks FAILED",
                    failed.len(),
                    outcome.checks.len()
                );
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Compare(args) => {
            let config = load_config(&args)?;
            let (rows, files) = cmd_compare(&config)?;
            for r in &rows {
                println!(
                    "seed {} {:<13} J={:.6e} var={:.6e} mc_vhat={:.6e}",
                    r.seed, r.baseline, r.objective_j, r.exact_variance, r.mc_var_of_mean
                );
            }
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let config = load_config(&args)?;
            let (outputs, files) = cmd_train(&config)?;
            for out in &outputs {
                let status = match (out.aborted_at, out.reached_at) {
                    (Some(step), _) => format!("ABORTED at step {step} (non-finite parameters)"),
                    (None, Some(step)) => format!("reached 98% of optimum at step {step}"),
                    (None, None) => "did not reach 98% of optimum".to_string(),
                };
                println!(
                    "seed {}: final reward {:.6} (optimum {:.6}), {}",
                    out.seed, out.final_reward, out.optimum, status
                );
            }
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            if outputs.iter().any(|o| o.aborted_at.is_some()) {
                Ok(ExitCode::FAILURE)
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Replay {
            log,
            baseline,
            clip,
            out,
        } => {
            let (output, path) = cmd_replay(&log, &baseline, clip, &out)?;
            println!(
                "replayed {} trajectories in {} groups",
                output.trajectories, output.groups
            );
            eprintln!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
