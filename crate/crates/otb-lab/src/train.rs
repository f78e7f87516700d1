//! On-policy gradient-ascent training at toy scale: seeded group rollouts,
//! group-baseline advantages, diagnostics, and an exact expected-reward
//! curve from the oracle.

use otb_core::baselines::{
    advantages, AdvantageOptions, AdvantageTable, BaselineKind, GroupBatch, MemberStats,
};
use otb_core::estimators::{
    batch_diagnostics, grad_causal_with_advantages, grad_noncausal, grad_tis_with_advantages,
    EstimatorForm, EstimatorSpec,
};
use otb_core::oracle::{EnumeratedSpace, OracleError};
use otb_core::{GradVec, PolicyParams, RewardModel};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::config::{mix_seeds, ExperimentConfig};
use crate::replay::push_advantage_rows;
use crate::report::{fmt_f64, Csv};
use crate::HarnessError;

/// Monte-Carlo sample count when the instance outgrows the enumeration cap.
const MC_REWARD_SAMPLES: usize = 4096;

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub expected_reward: f64,
    pub grad_norm: f64,
    pub v_hat: f64,
    pub p_total: f64,
    pub signal: f64,
    /// Variance of the mean with the token-resolved power term, which is
    /// the exact second moment of the causal estimator on tabular policies.
    pub v_hat_token: f64,
}

pub struct TrainOutput {
    pub seed: u64,
    pub baseline: String,
    pub group_size: usize,
    pub records: Vec<StepRecord>,
    /// Best total reward any trajectory in the support can earn.
    pub optimum: f64,
    pub final_reward: f64,
    pub best_reward: f64,
    /// First step whose policy met 98% of the optimum.
    pub reached_at: Option<usize>,
    /// Step at which non-finite parameters aborted the run, if any.
    pub aborted_at: Option<usize>,
    pub trajectory_log: String,
    pub advantage_csv: String,
}

impl TrainOutput {
    pub fn run_csv(&self) -> String {
        let mut csv = Csv::new(&[
            "step",
            "expected_reward",
            "grad_norm",
            "v_hat",
            "p_total",
            "signal",
            "v_hat_token",
            "baseline",
            "n",
            "seed",
        ]);
        for r in &self.records {
            csv.row(&[
                r.step.to_string(),
                fmt_f64(r.expected_reward),
                fmt_f64(r.grad_norm),
                fmt_f64(r.v_hat),
                fmt_f64(r.p_total),
                fmt_f64(r.signal),
                fmt_f64(r.v_hat_token),
                self.baseline.clone(),
                self.group_size.to_string(),
                self.seed.to_string(),
            ]);
        }
        csv.into_string()
    }
}

fn thread_budget() -> usize {
    std::env::var("OTBLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(1)
}

struct GroupResult {
    group: GroupBatch,
    table: AdvantageTable,
    grads: Vec<GradVec>,
}

fn expected_reward_of(
    params: &PolicyParams,
    model: &RewardModel,
    seed: u64,
    step: usize,
) -> Result<f64, HarnessError> {
    match EnumeratedSpace::enumerate(params, 0, params.t_max()) {
        Ok(space) => Ok(space.expected_reward(model)),
        Err(OracleError::StateSpaceTooLarge { .. }) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(seed, 0xe000 + step as u64));
            let mut acc = 0.0;
            for _ in 0..MC_REWARD_SAMPLES {
                let t = params
                    .sample_trajectory(0, params.t_max(), &mut rng)
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                acc += model.score(&t.tokens).iter().sum::<f64>();
            }
            Ok(acc / MC_REWARD_SAMPLES as f64)
        }
        Err(e) => Err(e.into()),
    }
}

fn rollout_group(
    params: &PolicyParams,
    model: &RewardModel,
    spec: &EstimatorSpec,
    prompt_id: u64,
    group_seed: u64,
    n: usize,
    value_space: Option<&EnumeratedSpace>,
) -> Result<GroupResult, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(group_seed);
    let mut members = Vec::with_capacity(n);
    for _ in 0..n {
        let mut t = params
            .sample_trajectory(prompt_id, params.t_max(), &mut rng)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        model.apply(&mut t);
        if spec.form == EstimatorForm::CausalTis || spec.baseline == BaselineKind::OtbTis {
            // Full on-policy loop: the rollout policy is the training policy.
            t.behavior_logprobs = Some((0..t.len()).map(|s| t.sampled_logprob(s)).collect());
        }
        members.push(t);
    }
    let group = GroupBatch::new(members).map_err(|e| HarnessError::Config(e.to_string()))?;

    let table = match spec.form {
        EstimatorForm::NonCausal => {
            // Trajectory-level advantage broadcast over valid steps.
            let constants: Vec<f64> = match spec.baseline {
                BaselineKind::None => vec![0.0; group.len()],
                BaselineKind::Grpo => vec![otb_core::baselines::grpo_baseline(&group); group.len()],
                BaselineKind::Rloo => (0..group.len())
                    .map(|i| otb_core::baselines::rloo_baseline(&group, i))
                    .collect::<Result<_, _>>()
                    .map_err(|e| HarnessError::Config(e.to_string()))?,
                BaselineKind::Opo => {
                    vec![otb_core::baselines::opo_length_baseline(&group); group.len()]
                }
                BaselineKind::Ogb => vec![otb_core::baselines::ogb_hat(&group); group.len()],
                other => {
                    return Err(HarnessError::Config(format!(
                        "non_causal form cannot use token-level baseline `{}`",
                        other.name()
                    )))
                }
            };
            AdvantageTable {
                rows: group
                    .members()
                    .iter()
                    .zip(&constants)
                    .map(|(m, b)| vec![m.total_reward() - b; m.len()])
                    .collect(),
            }
        }
        EstimatorForm::Causal | EstimatorForm::CausalTis => {
            let value_fn = |prefix: &[otb_core::TokenId]| -> f64 {
                value_space
                    .expect("validated: value_oracle needs enumeration")
                    .exact_value_baseline(model, prefix)
                    .unwrap_or(0.0)
            };
            let options = AdvantageOptions {
                exclude_self: false,
                tis_clip: spec.clip,
                value_fn: if spec.baseline == BaselineKind::ValueOracle {
                    Some(&value_fn)
                } else {
                    None
                },
            };
            advantages(&group, spec.baseline, &options)
                .map_err(|e| HarnessError::Config(e.to_string()))?
        }
    };

    let grads: Vec<GradVec> = group
        .members()
        .iter()
        .zip(&table.rows)
        .map(|(m, row)| match spec.form {
            EstimatorForm::NonCausal => grad_noncausal(params, m, m.total_reward() - row[0]),
            EstimatorForm::Causal => grad_causal_with_advantages(params, m, row),
            EstimatorForm::CausalTis => grad_tis_with_advantages(params, m, row, spec.clip),
        })
        .collect::<Result<_, _>>()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(GroupResult {
        group,
        table,
        grads,
    })
}

pub fn run_train(config: &ExperimentConfig, seed: u64) -> Result<TrainOutput, HarnessError> {
    let spec = config.estimator_spec()?;
    let model = config.reward.clone();
    let mut params = config.build_policy(seed)?;
    let n = config.run.group_size;
    let groups_per_step = config.run.batch_groups;
    let threads = thread_budget();

    // The reachable-trajectory support (and with it the best attainable
    // reward) is policy-independent; compute it once from the initial space.
    let needs_oracle = spec.baseline == BaselineKind::ValueOracle;
    let initial_space = EnumeratedSpace::enumerate(&params, 0, params.t_max());
    let optimum = match &initial_space {
        Ok(space) => space.max_reward(&model),
        Err(OracleError::StateSpaceTooLarge { .. }) if !needs_oracle => f64::NAN,
        Err(e) => return Err(HarnessError::Config(e.to_string())),
    };

    let mut records = Vec::with_capacity(config.run.steps);
    let mut log = String::new();
    let mut adv_csv = Csv::new(&[
        "prompt_id",
        "member",
        "step",
        "token",
        "reward_to_go",
        "energy_cum",
        "advantage",
    ]);
    let mut aborted_at = None;

    for step in 0..config.run.steps {
        let step_space = match EnumeratedSpace::enumerate(&params, 0, params.t_max()) {
            Ok(space) => Some(space),
            Err(OracleError::StateSpaceTooLarge { .. }) if !needs_oracle => None,
            Err(e) => return Err(HarnessError::Config(e.to_string())),
        };
        let expected_reward = match &step_space {
            Some(space) => space.expected_reward(&model),
            None => expected_reward_of(&params, &model, seed, step)?,
        };

        // Roll out the batch, optionally across threads; every group owns a
        // derived rng stream, so the schedule does not affect results.
        let group_ids: Vec<(u64, u64)> = (0..groups_per_step)
            .map(|g| {
                let prompt_id = (step * groups_per_step + g) as u64;
                let group_seed = mix_seeds(mix_seeds(seed, step as u64), g as u64);
                (prompt_id, group_seed)
            })
            .collect();
        let results: Vec<GroupResult> = if threads <= 1 || groups_per_step <= 1 {
            group_ids
                .iter()
                .map(|(pid, gs)| {
                    rollout_group(&params, &model, &spec, *pid, *gs, n, step_space.as_ref())
                })
                .collect::<Result<_, _>>()?
        } else {
            let chunk = group_ids.len().div_ceil(threads);
            let params_ref = &params;
            let model_ref = &model;
            let spec_ref = &spec;
            let space_ref = step_space.as_ref();
            std::thread::scope(|scope| {
                let handles: Vec<_> = group_ids
                    .chunks(chunk)
                    .map(|ids| {
                        scope.spawn(move || {
                            ids.iter()
                                .map(|(pid, gs)| {
                                    rollout_group(
                                        params_ref, model_ref, spec_ref, *pid, *gs, n, space_ref,
                                    )
                                })
                                .collect::<Result<Vec<_>, _>>()
                        })
                    })
                    .collect();
                let mut out = Vec::with_capacity(group_ids.len());
                for h in handles {
                    out.extend(h.join().expect("rollout thread panicked")?);
                }
                Ok::<_, HarnessError>(out)
            })?
        };

        // Batch statistics and the mean update direction, reduced in fixed
        // group order.
        let mut batch_grad = GradVec::zeros(params.param_count());
        let mut v_hat = 0.0;
        let mut p_total = 0.0;
        let mut signal = 0.0;
        let mut v_hat_token = 0.0;
        for r in &results {
            let diag = batch_diagnostics(&r.group, &r.table, &r.grads);
            v_hat += diag.var_of_mean;
            p_total += diag.p_total;
            signal += diag.signal;
            v_hat_token += (diag.p_total_token - diag.signal) / (n as f64 - 1.0);
            for g in &r.grads {
                batch_grad.axpy(1.0 / (groups_per_step * n) as f64, g);
            }
            for (i, m) in r.group.members().iter().enumerate() {
                log.push_str(
                    &serde_json::to_string(&m.to_log_record())
                        .expect("log records serialize"),
                );
                log.push('\n');
                let stats = MemberStats::from_trajectory(m);
                push_advantage_rows(
                    &mut adv_csv,
                    r.group.prompt_id(),
                    i,
                    &m.tokens,
                    &stats,
                    &r.table.rows[i],
                );
            }
        }
        v_hat /= groups_per_step as f64;
        p_total /= groups_per_step as f64;
        signal /= groups_per_step as f64;
        v_hat_token /= groups_per_step as f64;

        records.push(StepRecord {
            step,
            expected_reward,
            grad_norm: batch_grad.norm(),
            v_hat,
            p_total,
            signal,
            v_hat_token,
        });

        let next = params
            .updated(batch_grad.as_slice(), config.run.learning_rate)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !next.params_vec().iter().all(|p| p.is_finite()) {
            aborted_at = Some(step);
            break;
        }
        params = next;
    }

    let final_reward = expected_reward_of(&params, &model, seed, config.run.steps)?;
    let mut best_reward = final_reward;
    let mut reached_at = None;
    for r in &records {
        best_reward = best_reward.max(r.expected_reward);
        if reached_at.is_none() && optimum.is_finite() && r.expected_reward >= 0.98 * optimum {
            reached_at = Some(r.step);
        }
    }
    if reached_at.is_none() && optimum.is_finite() && final_reward >= 0.98 * optimum {
        reached_at = Some(config.run.steps);
    }

    Ok(TrainOutput {
        seed,
        baseline: spec.baseline.name().to_string(),
        group_size: n,
        records,
        optimum,
        final_reward,
        best_reward,
        reached_at,
        aborted_at,
        trajectory_log: log,
        advantage_csv: adv_csv.into_string(),
    })
}

/// Trailing window mean used by the optional smoothed curves.
pub fn window_mean(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return values.to_vec();
    }
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = i.saturating_sub(window - 1);
            let slice = &values[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}
