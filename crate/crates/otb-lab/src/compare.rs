//! Side-by-side baseline comparison: exact objective value, exact estimator
//! variance, and a Monte-Carlo estimate of the variance of the batch mean
//! at the configured group size, one row per (seed, baseline kind).

use otb_core::baselines::{
    advantages, AdvantageOptions, BaselineKind, GroupBatch,
};
use otb_core::estimators::batch_diagnostics;
use otb_core::estimators::grad_causal_with_advantages;
use otb_core::oracle::{BaselineSchedule, EnumeratedSpace};
use otb_core::{GradVec, RewardModel, Trajectory};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::config::{mix_seeds, ExperimentConfig};
use crate::report::{fmt_f64, Csv};
use crate::HarnessError;

pub const COMPARED_KINDS: [BaselineKind; 9] = [
    BaselineKind::None,
    BaselineKind::Grpo,
    BaselineKind::Rloo,
    BaselineKind::Opo,
    BaselineKind::Ogb,
    BaselineKind::Otb,
    BaselineKind::OtbIsolated,
    BaselineKind::OtbTis,
    BaselineKind::ValueOracle,
];

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub seed: u64,
    pub baseline: &'static str,
    pub objective_j: f64,
    pub exact_variance: f64,
    pub mc_var_of_mean: f64,
}

pub fn compare_csv(rows: &[CompareRow], n: usize) -> String {
    let mut csv = Csv::new(&[
        "seed",
        "baseline",
        "objective_j",
        "exact_variance",
        "mc_var_of_mean",
        "n",
    ]);
    for r in rows {
        csv.row(&[
            r.seed.to_string(),
            r.baseline.to_string(),
            fmt_f64(r.objective_j),
            fmt_f64(r.exact_variance),
            fmt_f64(r.mc_var_of_mean),
            n.to_string(),
        ]);
    }
    csv.into_string()
}

/// Oracle schedule standing in for a group-statistics baseline: the value
/// the empirical estimator converges to as the group grows.
fn oracle_schedule(
    space: &EnumeratedSpace,
    model: &RewardModel,
    kind: BaselineKind,
) -> Result<BaselineSchedule, HarnessError> {
    let t_max = space.t_max();
    Ok(match kind {
        BaselineKind::None => BaselineSchedule::zeros(t_max),
        BaselineKind::Grpo | BaselineKind::Rloo => {
            BaselineSchedule::constant(space.expected_reward(model), t_max)
        }
        BaselineKind::Opo => BaselineSchedule::constant(space.exact_length_baseline(model), t_max),
        BaselineKind::Ogb => BaselineSchedule::constant(space.exact_ogb(model)?, t_max),
        // On-policy ratios are 1, so the truncated weights reduce to the
        // plain realized energy.
        BaselineKind::Otb | BaselineKind::OtbTis => space.otb_schedule(model),
        BaselineKind::OtbIsolated => space.isolated_schedule(model),
        BaselineKind::ValueOracle => space.mean_g_schedule(model),
    })
}

pub fn run_compare(config: &ExperimentConfig) -> Result<Vec<CompareRow>, HarnessError> {
    let model = config.reward.clone();
    let mut rows = Vec::new();
    for &seed in &config.run.seeds {
        let params = config.build_policy(seed)?;
        let space = EnumeratedSpace::enumerate(&params, 0, params.t_max())?;
        for kind in COMPARED_KINDS {
            let (objective_j, exact_variance) = if kind == BaselineKind::ValueOracle {
                // Prefix-resolved value baseline, not a per-step constant.
                let j = space.objective_j_with(&model, |traj, t| {
                    space
                        .exact_value_baseline(&model, &traj.tokens[..t])
                        .unwrap_or(0.0)
                });
                let v = space.causal_variance(&model, |traj, t| {
                    space
                        .exact_value_baseline(&model, &traj.tokens[..t])
                        .unwrap_or(0.0)
                });
                (j, v)
            } else {
                let schedule = oracle_schedule(&space, &model, kind)?;
                (
                    space.objective_j(&model, &schedule)?,
                    space.causal_variance(&model, |_, t| schedule.values[t]),
                )
            };
            let mc_var_of_mean = mc_var_of_mean(config, &space, &model, kind, seed)?;
            rows.push(CompareRow {
                seed,
                baseline: kind.name(),
                objective_j,
                exact_variance,
                mc_var_of_mean,
            });
        }
    }
    Ok(rows)
}

/// Average diagnostics `V_hat` over sampled batches using the empirical
/// group estimator of `kind` at the configured N.
pub fn mc_var_of_mean(
    config: &ExperimentConfig,
    space: &EnumeratedSpace,
    model: &RewardModel,
    kind: BaselineKind,
    seed: u64,
) -> Result<f64, HarnessError> {
    let params = space.params();
    let n = config.run.group_size;
    let batches = config.run.compare_batches.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(seed, 0xc0817));
    let mut acc = 0.0;
    for _ in 0..batches {
        let members: Vec<Trajectory> = (0..n)
            .map(|_| {
                let mut t = params
                    .sample_trajectory(0, params.t_max(), &mut rng)
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                model.apply(&mut t);
                if kind == BaselineKind::OtbTis {
                    t.behavior_logprobs =
                        Some((0..t.len()).map(|s| t.sampled_logprob(s)).collect());
                }
                Ok::<_, HarnessError>(t)
            })
            .collect::<Result<_, _>>()?;
        let group = GroupBatch::new(members).map_err(|e| HarnessError::Config(e.to_string()))?;
        let value_fn = |prefix: &[otb_core::TokenId]| -> f64 {
            space.exact_value_baseline(model, prefix).unwrap_or(0.0)
        };
        let options = AdvantageOptions {
            exclude_self: false,
            tis_clip: config.estimator.clip,
            value_fn: if kind == BaselineKind::ValueOracle {
                Some(&value_fn)
            } else {
                None
            },
        };
        let table =
            advantages(&group, kind, &options).map_err(|e| HarnessError::Config(e.to_string()))?;
        let grads: Vec<GradVec> = group
            .members()
            .iter()
            .zip(&table.rows)
            .map(|(m, row)| grad_causal_with_advantages(params, m, row))
            .collect::<Result<_, _>>()
            .map_err(|e: otb_core::estimators::EstimatorError| {
                HarnessError::Config(e.to_string())
            })?;
        acc += batch_diagnostics(&group, &table, &grads).var_of_mean;
    }
    Ok(acc / batches as f64)
}
