//! Gradient estimators and batch variance diagnostics.
//!
//! Three estimator forms:
//!
//! - non-causal: `(R - B) * sum_t s_t`
//! - causal: `sum_t s_t (G_t - B_t)`
//! - truncated importance sampling: `sum_t min(c, rho_t) s_t (G_t - B_t)`
//!   with per-token ratios `rho_t = pi_target(y_t) / pi_behavior(y_t)`.
//!
//! The per-token truncated form follows the training recipe and is biased
//! even without truncation, because per-token ratios leave the prefix
//! distribution uncorrected. [`grad_is`] is the untruncated reference
//! estimator that reweights the whole term by the trajectory likelihood
//! ratio; its enumeration mean under the behavior policy recovers the
//! on-policy gradient exactly.
//!
//! On-policy estimators read the step distributions recorded on the
//! trajectory (they are the acting policy's own); the off-policy forms
//! recompute target-policy distributions from `params`.

use crate::baselines::{AdvantageTable, BaselineError, BaselineKind, GroupBatch};
use crate::oracle::{BaselineSchedule, EnumeratedSpace, OracleError};
use crate::policy::{importance_ratio, GradVec, PolicyError, PolicyParams};
use crate::rewards::{RewardModel, Trajectory};

/// Cap on the number of ordered N-tuples enumerated by
/// [`group_expectation_bias`].
pub const TUPLE_CAP: u128 = 2_000_000;

#[derive(Debug, thiserror::Error)]
pub enum EstimatorError {
    #[error("trajectory is missing behavior log-probabilities")]
    MissingBehaviorLogprobs,
    #[error("schedule has {got} entries, trajectory needs {want}")]
    ScheduleTooShort { got: usize, want: usize },
    #[error("advantage row has {got} entries, trajectory needs {want}")]
    AdvantageLenMismatch { got: usize, want: usize },
    #[error("tuple space of {count} exceeds the cap of {cap}")]
    TupleSpaceTooLarge { count: u128, cap: u128 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Estimator form selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorForm {
    NonCausal,
    Causal,
    CausalTis,
}

impl EstimatorForm {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "non_causal" => Self::NonCausal,
            "causal" => Self::Causal,
            "causal_tis" => Self::CausalTis,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::NonCausal => "non_causal",
            Self::Causal => "causal",
            Self::CausalTis => "causal_tis",
        }
    }
}

/// Form plus baseline choice, the config-facing estimator description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorSpec {
    pub form: EstimatorForm,
    pub baseline: BaselineKind,
    /// Truncation threshold, used by the TIS form only.
    pub clip: f64,
}

/// Non-causal REINFORCE with a constant baseline: `(R - b) * sum_t s_t`.
pub fn grad_noncausal(
    params: &PolicyParams,
    traj: &Trajectory,
    baseline: f64,
) -> Result<GradVec, EstimatorError> {
    let scale = traj.total_reward() - baseline;
    let mut acc = GradVec::zeros(params.param_count());
    for t in 0..traj.len() {
        let s = params.step_score_given_dist(&traj.tokens[..t], &traj.step_dists[t], traj.tokens[t])?;
        s.add_scaled_into(acc.as_mut_slice(), scale);
    }
    Ok(acc)
}

/// Causal estimator with a per-step schedule: `sum_t s_t (G_t - B_t)`.
pub fn grad_causal(
    params: &PolicyParams,
    traj: &Trajectory,
    schedule: &BaselineSchedule,
) -> Result<GradVec, EstimatorError> {
    if schedule.len() < traj.len() {
        return Err(EstimatorError::ScheduleTooShort {
            got: schedule.len(),
            want: traj.len(),
        });
    }
    let g = traj.reward_to_go();
    let adv: Vec<f64> = (0..traj.len()).map(|t| g[t] - schedule.values[t]).collect();
    grad_causal_with_advantages(params, traj, &adv)
}

/// Causal estimator with explicit per-step advantages, the form group
/// baselines feed.
pub fn grad_causal_with_advantages(
    params: &PolicyParams,
    traj: &Trajectory,
    advantages: &[f64],
) -> Result<GradVec, EstimatorError> {
    if advantages.len() != traj.len() {
        return Err(EstimatorError::AdvantageLenMismatch {
            got: advantages.len(),
            want: traj.len(),
        });
    }
    let mut acc = GradVec::zeros(params.param_count());
    for t in 0..traj.len() {
        let s = params.step_score_given_dist(&traj.tokens[..t], &traj.step_dists[t], traj.tokens[t])?;
        s.add_scaled_into(acc.as_mut_slice(), advantages[t]);
    }
    Ok(acc)
}

/// Truncated importance sampling: `sum_t min(c, rho_t) s_t (G_t - B_t)`.
///
/// Target-policy distributions and scores come from `params`; behavior
/// log-probabilities must be recorded on the trajectory.
pub fn grad_tis(
    params: &PolicyParams,
    traj: &Trajectory,
    schedule: &BaselineSchedule,
    clip: f64,
) -> Result<GradVec, EstimatorError> {
    let ratios = token_ratios(params, traj)?;
    if schedule.len() < traj.len() {
        return Err(EstimatorError::ScheduleTooShort {
            got: schedule.len(),
            want: traj.len(),
        });
    }
    let g = traj.reward_to_go();
    let mut acc = GradVec::zeros(params.param_count());
    for t in 0..traj.len() {
        let s = params.step_score(&traj.tokens[..t], traj.tokens[t])?;
        let a = ratios[t].min(clip) * (g[t] - schedule.values[t]);
        s.add_scaled_into(acc.as_mut_slice(), a);
    }
    Ok(acc)
}

/// Untruncated importance sampling with the full trajectory likelihood
/// ratio: `(prod_t rho_t) * sum_t s_t (G_t - B_t)`. Exactly unbiased for
/// the on-policy gradient when averaged under the behavior policy.
pub fn grad_is(
    params: &PolicyParams,
    traj: &Trajectory,
    schedule: &BaselineSchedule,
) -> Result<GradVec, EstimatorError> {
    let ratios = token_ratios(params, traj)?;
    if schedule.len() < traj.len() {
        return Err(EstimatorError::ScheduleTooShort {
            got: schedule.len(),
            want: traj.len(),
        });
    }
    let weight: f64 = ratios.iter().product();
    let g = traj.reward_to_go();
    let mut acc = GradVec::zeros(params.param_count());
    for t in 0..traj.len() {
        let s = params.step_score(&traj.tokens[..t], traj.tokens[t])?;
        s.add_scaled_into(acc.as_mut_slice(), weight * (g[t] - schedule.values[t]));
    }
    Ok(acc)
}

/// TIS estimator over a precomputed advantage row, for the on-policy
/// training path where the recorded step distributions are the target
/// policy's own: ratios come from the recorded sampled probabilities
/// against the behavior log-probabilities.
pub fn grad_tis_with_advantages(
    params: &PolicyParams,
    traj: &Trajectory,
    advantages: &[f64],
    clip: f64,
) -> Result<GradVec, EstimatorError> {
    if advantages.len() != traj.len() {
        return Err(EstimatorError::AdvantageLenMismatch {
            got: advantages.len(),
            want: traj.len(),
        });
    }
    let blp = traj
        .behavior_logprobs
        .as_ref()
        .ok_or(EstimatorError::MissingBehaviorLogprobs)?;
    let mut acc = GradVec::zeros(params.param_count());
    for t in 0..traj.len() {
        let rho = importance_ratio(traj.sampled_logprob(t), blp[t]);
        let s = params.step_score_given_dist(&traj.tokens[..t], &traj.step_dists[t], traj.tokens[t])?;
        s.add_scaled_into(acc.as_mut_slice(), rho.min(clip) * advantages[t]);
    }
    Ok(acc)
}

fn token_ratios(params: &PolicyParams, traj: &Trajectory) -> Result<Vec<f64>, EstimatorError> {
    let blp = traj
        .behavior_logprobs
        .as_ref()
        .ok_or(EstimatorError::MissingBehaviorLogprobs)?;
    (0..traj.len())
        .map(|t| {
            let ln_target = params.log_prob(&traj.tokens[..t], traj.tokens[t])?;
            Ok(importance_ratio(ln_target, blp[t]))
        })
        .collect()
}

/// The three batch statistics that monitor training noise, plus the norm of
/// the mean gradient and a token-resolved variant of the power term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchDiagnostics {
    /// `(1/N) sum_i W(tau_i) A(tau_i)^2` with trajectory-level advantages.
    pub p_total: f64,
    /// `|| (1/N) sum_i g_i ||^2`.
    pub signal: f64,
    /// `(p_total - signal) / (N - 1)`. May come out slightly negative from
    /// sampling noise; stored raw, clamp only in reports.
    pub var_of_mean: f64,
    /// Norm of the mean gradient, `sqrt(signal)`.
    pub grad_norm: f64,
    /// Token-resolved power `(1/N) sum_i sum_t w_t A_t^2`.
    pub p_total_token: f64,
}

/// Batch diagnostics from a group, its advantage table, and the per-member
/// estimator gradients. The trajectory-level advantage of member `i` is its
/// first-step entry (`G_1 = R`).
pub fn batch_diagnostics(
    group: &GroupBatch,
    advantages: &AdvantageTable,
    grads: &[GradVec],
) -> BatchDiagnostics {
    let n = group.len();
    assert!(n >= 2, "diagnostics need at least 2 members");
    assert_eq!(advantages.member_count(), n);
    assert_eq!(grads.len(), n);

    let mut p_total = 0.0;
    let mut p_total_token = 0.0;
    let mut mean = GradVec::zeros(grads[0].len());
    for (i, m) in group.members().iter().enumerate() {
        let total_energy = *m.energy_profile().last().unwrap();
        let traj_adv = advantages.trajectory_advantage(i);
        p_total += total_energy * traj_adv * traj_adv;
        for (t, a) in advantages.rows[i].iter().enumerate() {
            p_total_token += m.step_proxy(t) * a * a;
        }
        mean.axpy(1.0, &grads[i]);
    }
    p_total /= n as f64;
    p_total_token /= n as f64;
    mean.scale(1.0 / n as f64);
    let signal = mean.norm_sq();
    BatchDiagnostics {
        p_total,
        signal,
        var_of_mean: (p_total - signal) / (n as f64 - 1.0),
        grad_norm: signal.sqrt(),
        p_total_token,
    }
}

/// How each member's baseline is formed inside the exact tuple enumeration.
#[derive(Clone, Copy)]
pub enum GroupBaselinePlan<'a> {
    /// An empirical group-statistics baseline.
    Kind(BaselineKind),
    /// A fixed per-step schedule shared by every member.
    FixedSchedule(&'a BaselineSchedule),
}

/// Exact finite-sample bias of the batch-mean causal estimator: the mean
/// over all ordered N-tuples of trajectories of the tuple-mean gradient,
/// minus the true gradient, in max-norm.
pub fn group_expectation_bias(
    space: &EnumeratedSpace,
    model: &RewardModel,
    plan: GroupBaselinePlan,
    n: usize,
) -> Result<f64, EstimatorError> {
    assert!(n >= 2, "groups have at least 2 members");
    let count = (space.len() as u128).pow(n as u32);
    if count > TUPLE_CAP {
        return Err(EstimatorError::TupleSpaceTooLarge {
            count,
            cap: TUPLE_CAP,
        });
    }
    let params = space.params();
    let rewarded: Vec<Trajectory> = (0..space.len())
        .map(|i| space.rewarded_trajectory(i, model))
        .collect();

    let mut acc = GradVec::zeros(params.param_count());
    let mut idx = vec![0usize; n];
    loop {
        let p_tuple: f64 = idx.iter().map(|&i| space.probability(i)).product();
        if p_tuple > 0.0 {
            let members: Vec<Trajectory> = idx.iter().map(|&i| rewarded[i].clone()).collect();
            let group = GroupBatch::new(members)?;
            let table = match plan {
                GroupBaselinePlan::Kind(kind) => crate::baselines::advantages(
                    &group,
                    kind,
                    &crate::baselines::AdvantageOptions::default(),
                )?,
                GroupBaselinePlan::FixedSchedule(schedule) => {
                    let rows = group
                        .members()
                        .iter()
                        .map(|m| {
                            if schedule.len() < m.len() {
                                return Err(EstimatorError::ScheduleTooShort {
                                    got: schedule.len(),
                                    want: m.len(),
                                });
                            }
                            let g = m.reward_to_go();
                            Ok((0..m.len()).map(|t| g[t] - schedule.values[t]).collect())
                        })
                        .collect::<Result<Vec<Vec<f64>>, EstimatorError>>()?;
                    AdvantageTable { rows }
                }
            };
            let mut tuple_mean = GradVec::zeros(params.param_count());
            for (member, row) in group.members().iter().zip(&table.rows) {
                let g = grad_causal_with_advantages(params, member, row)?;
                tuple_mean.axpy(1.0 / n as f64, &g);
            }
            acc.axpy(p_tuple, &tuple_mean);
        }
        // Odometer over ordered tuples.
        let mut pos = 0;
        loop {
            idx[pos] += 1;
            if idx[pos] < space.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
            if pos == n {
                let truth = space.true_gradient(model);
                return Ok(acc.max_diff(&truth));
            }
        }
    }
}
