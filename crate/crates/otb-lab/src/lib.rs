//! Experiment harness over the core laboratory: JSON configuration, the
//! `verify` / `compare` / `train` / `replay` commands, CSV reports, and
//! native SVG charts.
//!
//! Everything is seeded: a (config, seed) pair maps to byte-identical
//! output files. Randomness comes exclusively from ChaCha8 streams keyed by
//! SplitMix64-derived seeds (see [`config::mix_seeds`]).

// `!(x > 0.0)` config guards are NaN-aware on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// The chart panel tables pair a field accessor with file and title.
#![allow(clippy::type_complexity)]

use std::path::{Path, PathBuf};

pub mod compare;
pub mod config;
pub mod replay;
pub mod report;
pub mod svg;
pub mod train;
pub mod verify;

use otb_core::baselines::BaselineKind;
use otb_core::oracle::OracleError;

use config::ExperimentConfig;
use report::{checks_to_csv, fmt_f64, write_file, Csv};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("replay error: {0}")]
    Replay(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

fn svg_enabled(config: &ExperimentConfig) -> bool {
    config.output.format == "csv+svg"
}

/// Run the verification suite and write `verify.csv` plus the oracle
/// quantity table. Returns the outcome and the files written; any failed
/// check should surface as a nonzero process exit.
pub fn cmd_verify(
    config: &ExperimentConfig,
) -> Result<(verify::VerifyOutcome, Vec<PathBuf>), HarnessError> {
    let outcome = verify::run_verify(config)?;
    let dir = Path::new(&config.output.dir);
    let mut written = Vec::new();

    let verify_path = dir.join("verify.csv");
    write_file(&verify_path, &checks_to_csv(&outcome.checks))?;
    written.push(verify_path);

    let mut csv = Csv::new(&["seed", "quantity", "value"]);
    for (seed, name, value) in &outcome.quantities {
        csv.row(&[seed.to_string(), name.clone(), fmt_f64(*value)]);
    }
    let quantities_path = dir.join("oracle_quantities.csv");
    write_file(&quantities_path, &csv.into_string())?;
    written.push(quantities_path);
    Ok((outcome, written))
}

/// Compare every baseline kind on the configured instance; write the
/// per-kind CSV and, when enabled, bar charts of the objective and the
/// exact variance.
pub fn cmd_compare(
    config: &ExperimentConfig,
) -> Result<(Vec<compare::CompareRow>, Vec<PathBuf>), HarnessError> {
    let rows = compare::run_compare(config)?;
    let dir = Path::new(&config.output.dir);
    let mut written = Vec::new();

    let csv_path = dir.join("compare.csv");
    write_file(&csv_path, &compare::compare_csv(&rows, config.run.group_size))?;
    written.push(csv_path);

    if svg_enabled(config) {
        let labels: Vec<String> = compare::COMPARED_KINDS
            .iter()
            .map(|k| k.name().to_string())
            .collect();
        let panels: [(fn(&compare::CompareRow) -> f64, &str, &str); 3] = [
            (
                |r| r.objective_j,
                "compare_objective.svg",
                "per-step objective J by baseline",
            ),
            (
                |r| r.exact_variance,
                "compare_variance.svg",
                "exact estimator variance by baseline",
            ),
            (
                |r| r.mc_var_of_mean,
                "compare_vhat.svg",
                "Monte-Carlo variance of the batch mean",
            ),
        ];
        for (field, name, title) in panels {
            let series: Vec<(String, Vec<f64>)> = config
                .run
                .seeds
                .iter()
                .map(|seed| {
                    let values = compare::COMPARED_KINDS
                        .iter()
                        .map(|k| {
                            rows.iter()
                                .find(|r| r.seed == *seed && r.baseline == k.name())
                                .map(field)
                                .unwrap_or(0.0)
                        })
                        .collect();
                    (format!("seed {seed}"), values)
                })
                .collect();
            let path = dir.join(name);
            write_file(&path, &svg::bar_chart(title, name, &labels, &series))?;
            written.push(path);
        }
    }
    Ok((rows, written))
}

/// Train on every configured seed; write per-seed run CSVs, trajectory
/// logs, advantage tables, and the summary curves.
pub fn cmd_train(
    config: &ExperimentConfig,
) -> Result<(Vec<train::TrainOutput>, Vec<PathBuf>), HarnessError> {
    let dir = Path::new(&config.output.dir);
    let mut outputs = Vec::new();
    let mut written = Vec::new();
    for &seed in &config.run.seeds {
        let out = train::run_train(config, seed)?;
        let run_path = dir.join(format!("train_seed{seed}.csv"));
        write_file(&run_path, &out.run_csv())?;
        written.push(run_path);
        let log_path = dir.join(format!("trajectories_seed{seed}.jsonl"));
        write_file(&log_path, &out.trajectory_log)?;
        written.push(log_path);
        let adv_path = dir.join(format!("advantages_seed{seed}.csv"));
        write_file(&adv_path, &out.advantage_csv)?;
        written.push(adv_path);
        outputs.push(out);
    }

    if svg_enabled(config) {
        let window = config.run.smooth_window;
        let panels: [(fn(&train::StepRecord) -> f64, &str, &str); 3] = [
            (
                |r| r.expected_reward,
                "train_reward.svg",
                "expected reward (oracle)",
            ),
            (
                |r| r.v_hat,
                "train_vhat.svg",
                "estimated variance of the mean",
            ),
            (
                |r| r.grad_norm,
                "train_grad_norm.svg",
                "batch gradient norm",
            ),
        ];
        for (field, name, title) in panels {
            let series: Vec<(String, Vec<(f64, f64)>)> = outputs
                .iter()
                .map(|out| {
                    let raw: Vec<f64> = out.records.iter().map(field).collect();
                    let smooth = train::window_mean(&raw, window);
                    (
                        format!("seed {}", out.seed),
                        out.records
                            .iter()
                            .zip(smooth)
                            .map(|(r, v)| (r.step as f64, v))
                            .collect(),
                    )
                })
                .collect();
            let path = dir.join(name);
            write_file(&path, &svg::line_chart(title, "step", name, &series))?;
            written.push(path);
        }
    }
    Ok((outputs, written))
}

/// Recompute advantages from a trajectory log under the named baseline.
pub fn cmd_replay(
    log_path: &Path,
    baseline: &str,
    tis_clip: f64,
    out_dir: &Path,
) -> Result<(replay::ReplayOutput, PathBuf), HarnessError> {
    let kind = BaselineKind::parse(baseline)
        .ok_or_else(|| HarnessError::Config(format!("unknown baseline kind `{baseline}`")))?;
    let text = std::fs::read_to_string(log_path)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", log_path.display())))?;
    let output = replay::replay_log(&text, kind, tis_clip)?;
    let path = out_dir.join("replay_advantages.csv");
    write_file(&path, &output.csv)?;
    Ok((output, path))
}
