//! Empirical group-statistics baselines and per-token advantages — the code
//! path a trainer uses, computed from forward-pass quantities only.
//!
//! Conventions shared by every weighted baseline here:
//!
//! - Step indices are 0-based; "alive at step t" means `len > t`.
//! - Valid-token rule: members that ended before step t contribute to
//!   neither numerator nor denominator of a per-step baseline.
//! - Zero-denominator fallback: when the weight sum is `<= 1e-12` the
//!   baseline falls back to the unweighted survivor mean.

use crate::policy::{importance_ratio, TokenId};
use crate::rewards::{cumulative, RewardError, Trajectory, TrajectoryLogRecord};

/// Weight sums at or below this trigger the unweighted-mean fallback.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Default truncation threshold for importance ratios.
pub const DEFAULT_TIS_CLIP: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("a group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("group members disagree on prompt_id ({0} vs {1})")]
    PromptMismatch(u64, u64),
    #[error("member {0} has no tokens")]
    EmptyMember(usize),
    #[error("member {0} is missing behavior log-probabilities")]
    MissingBehaviorLogprobs(usize),
    #[error("truncation threshold must be positive, got {0}")]
    BadClip(f64),
    #[error("no member is alive at step {0}")]
    NoSurvivors(usize),
    #[error("member index {index} out of range for group of {size}")]
    MemberOutOfRange { index: usize, size: usize },
    #[error("baseline kind {0:?} needs a value function")]
    MissingValueFn(BaselineKind),
}

/// N trajectories sharing one prompt: the unit over which empirical
/// baselines are computed.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    prompt_id: u64,
    members: Vec<Trajectory>,
}

impl GroupBatch {
    pub fn new(members: Vec<Trajectory>) -> Result<Self, BaselineError> {
        if members.len() < 2 {
            return Err(BaselineError::GroupTooSmall(members.len()));
        }
        let prompt_id = members[0].prompt_id;
        for (i, m) in members.iter().enumerate() {
            if m.prompt_id != prompt_id {
                return Err(BaselineError::PromptMismatch(prompt_id, m.prompt_id));
            }
            if m.is_empty() {
                return Err(BaselineError::EmptyMember(i));
            }
        }
        Ok(Self { prompt_id, members })
    }

    pub fn prompt_id(&self) -> u64 {
        self.prompt_id
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Trajectory] {
        &self.members
    }

    pub fn member(&self, i: usize) -> &Trajectory {
        &self.members[i]
    }

    pub fn max_len(&self) -> usize {
        self.members.iter().map(|m| m.len()).max().unwrap_or(0)
    }

    pub fn total_rewards(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.total_reward()).collect()
    }
}

/// Which baseline a trainer subtracts from returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// No baseline; advantages are raw reward-to-go.
    None,
    /// Group mean of total rewards, one constant per group.
    Grpo,
    /// Leave-one-out mean, one constant per member.
    Rloo,
    /// Sequence-length-weighted reward centroid.
    Opo,
    /// Total-energy-weighted reward centroid.
    Ogb,
    /// Realized-energy-weighted reward-to-go centroid, per step.
    Otb,
    /// Single-step-energy-weighted reward-to-go centroid, per step.
    OtbIsolated,
    /// Off-policy variant with squared truncated importance ratios inside
    /// the energy weights.
    OtbTis,
    /// Exact per-prefix value function supplied by an oracle.
    ValueOracle,
}

impl BaselineKind {
    /// Trajectory-level kinds broadcast one advantage across a member's
    /// valid steps; token-level kinds vary per step.
    pub fn is_trajectory_level(&self) -> bool {
        matches!(
            self,
            BaselineKind::Grpo | BaselineKind::Rloo | BaselineKind::Opo | BaselineKind::Ogb
        )
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Self::None,
            "grpo" => Self::Grpo,
            "rloo" => Self::Rloo,
            "opo" => Self::Opo,
            "ogb" => Self::Ogb,
            "otb" => Self::Otb,
            "otb_isolated" => Self::OtbIsolated,
            "otb_tis" => Self::OtbTis,
            "value_oracle" => Self::ValueOracle,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Grpo => "grpo",
            Self::Rloo => "rloo",
            Self::Opo => "opo",
            Self::Ogb => "ogb",
            Self::Otb => "otb",
            Self::OtbIsolated => "otb_isolated",
            Self::OtbTis => "otb_tis",
            Self::ValueOracle => "value_oracle",
        }
    }
}

/// Exact per-prefix value function supplied by the oracle.
pub type ValueFn<'a> = &'a dyn Fn(&[TokenId]) -> f64;

/// Options for [`advantages`].
pub struct AdvantageOptions<'a> {
    /// Leave the member out of its own weighted baseline (bias diagnostics;
    /// the default keeps self-inclusion).
    pub exclude_self: bool,
    /// Truncation threshold for the TIS kind.
    pub tis_clip: f64,
    /// Per-prefix value function, required by [`BaselineKind::ValueOracle`].
    pub value_fn: Option<ValueFn<'a>>,
}

impl Default for AdvantageOptions<'_> {
    fn default() -> Self {
        Self {
            exclude_self: false,
            tis_clip: DEFAULT_TIS_CLIP,
            value_fn: None,
        }
    }
}

/// Per-member, per-step advantages. Rows are ragged: row `i` holds exactly
/// member i's valid steps, so post-EOS positions carry no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    pub rows: Vec<Vec<f64>>,
}

impl AdvantageTable {
    pub fn member_count(&self) -> usize {
        self.rows.len()
    }

    /// Trajectory-level advantage of a member: its first-step entry
    /// (`G_1 = R`, so for trajectory-level kinds this is `R - B`).
    pub fn trajectory_advantage(&self, member: usize) -> f64 {
        self.rows[member][0]
    }
}

/// The per-member scalars every group baseline is a function of: reward-to-
/// go, per-step proxy weights, and (off-policy) importance ratios. Both the
/// live trajectory path and the replay-from-log path reduce members to this
/// form, so the two compute advantages through identical arithmetic.
#[derive(Debug, Clone)]
pub struct MemberStats {
    /// Reward-to-go `G_t` per step.
    pub g: Vec<f64>,
    /// Per-step proxy weights `w_t`.
    pub w: Vec<f64>,
    /// Truncation-ready ratios `rho_t`, when behavior log-probs exist.
    pub ratios: Option<Vec<f64>>,
}

impl MemberStats {
    pub fn from_trajectory(m: &Trajectory) -> Self {
        let ratios = m.behavior_logprobs.as_ref().map(|blp| {
            (0..m.len())
                .map(|t| importance_ratio(m.sampled_logprob(t), blp[t]))
                .collect()
        });
        Self {
            g: m.reward_to_go(),
            w: (0..m.len()).map(|t| m.step_proxy(t)).collect(),
            ratios,
        }
    }

    pub fn from_record(rec: &TrajectoryLogRecord) -> Result<Self, RewardError> {
        let w = rec.proxy_weights()?;
        if rec.rewards.len() != rec.tokens.len() {
            return Err(RewardError::LengthMismatch {
                tokens: rec.tokens.len(),
                dists: w.len(),
                rewards: rec.rewards.len(),
            });
        }
        let ratios = match (&rec.behavior_logprobs, &rec.sampled_probs) {
            (Some(blp), Some(probs)) if blp.len() == rec.tokens.len() => Some(
                probs
                    .iter()
                    .zip(blp)
                    .map(|(p, b)| importance_ratio(p.ln(), *b))
                    .collect(),
            ),
            (Some(blp), None) => {
                let dists = rec.dists.as_ref().ok_or(RewardError::IncompleteLogRecord)?;
                Some(
                    rec.tokens
                        .iter()
                        .zip(dists)
                        .zip(blp)
                        .map(|((tok, d), b)| importance_ratio(d[*tok as usize].ln(), *b))
                        .collect(),
                )
            }
            _ => None,
        };
        Ok(Self {
            g: crate::rewards::reward_to_go(&rec.rewards),
            w,
            ratios,
        })
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// `G_1`, the total reward.
    pub fn total_reward(&self) -> f64 {
        self.g.first().copied().unwrap_or(0.0)
    }

    pub fn cumulative_w(&self) -> Vec<f64> {
        cumulative(&self.w)
    }

    pub fn total_energy(&self) -> f64 {
        self.w.iter().sum()
    }
}

fn weighted_centroid(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Option<f64> {
    let wsum: f64 = pairs.clone().map(|(_, w)| w).sum();
    if wsum <= WEIGHT_FLOOR {
        return None;
    }
    Some(pairs.map(|(g, w)| g * w).sum::<f64>() / wsum)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

fn group_stats(group: &GroupBatch) -> Vec<MemberStats> {
    group
        .members()
        .iter()
        .map(MemberStats::from_trajectory)
        .collect()
}

/// Group mean of total rewards.
pub fn grpo_baseline(group: &GroupBatch) -> f64 {
    grpo_from_stats(&group_stats(group))
}

pub fn grpo_from_stats(stats: &[MemberStats]) -> f64 {
    mean(stats.iter().map(MemberStats::total_reward))
}

/// Mean of the other N-1 members' total rewards.
pub fn rloo_baseline(group: &GroupBatch, member: usize) -> Result<f64, BaselineError> {
    rloo_from_stats(&group_stats(group), member)
}

pub fn rloo_from_stats(stats: &[MemberStats], member: usize) -> Result<f64, BaselineError> {
    if member >= stats.len() {
        return Err(BaselineError::MemberOutOfRange {
            index: member,
            size: stats.len(),
        });
    }
    Ok(mean(
        stats
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != member)
            .map(|(_, m)| m.total_reward()),
    ))
}

/// Sequence-length-weighted reward centroid.
pub fn opo_length_baseline(group: &GroupBatch) -> f64 {
    opo_from_stats(&group_stats(group))
}

pub fn opo_from_stats(stats: &[MemberStats]) -> f64 {
    weighted_centroid(stats.iter().map(|m| (m.total_reward(), m.len() as f64)))
        .unwrap_or_else(|| mean(stats.iter().map(MemberStats::total_reward)))
}

/// Total-proxy-energy-weighted reward centroid.
pub fn ogb_hat(group: &GroupBatch) -> f64 {
    ogb_from_stats(&group_stats(group), None)
}

pub fn ogb_from_stats(stats: &[MemberStats], exclude: Option<usize>) -> f64 {
    let included = || {
        stats
            .iter()
            .enumerate()
            .filter(move |(i, _)| Some(*i) != exclude)
    };
    weighted_centroid(included().map(|(_, m)| (m.total_reward(), m.total_energy())))
        .unwrap_or_else(|| mean(included().map(|(_, m)| m.total_reward())))
}

/// Realized-energy-weighted centroid of reward-to-go at step `t`, over the
/// members still alive at `t`.
pub fn otb_hat(group: &GroupBatch, t: usize) -> Result<f64, BaselineError> {
    step_centroid_from_stats(&group_stats(group), t, StepWeight::Cumulative, None)
}

/// Like [`otb_hat`] with single-step weights `w_t` instead of `W_t`.
pub fn otb_isolated_hat(group: &GroupBatch, t: usize) -> Result<f64, BaselineError> {
    step_centroid_from_stats(&group_stats(group), t, StepWeight::Isolated, None)
}

/// Off-policy variant: cumulative weights use squared truncated importance
/// ratios, `W_t = sum_{j<=t} min(c, rho_j)^2 * w_j`.
pub fn otb_tis_hat(group: &GroupBatch, t: usize, clip: f64) -> Result<f64, BaselineError> {
    let stats = group_stats(group);
    check_tis_inputs(&stats, clip)?;
    step_centroid_from_stats(&stats, t, StepWeight::CumulativeTis { clip }, None)
}

fn check_tis_inputs(stats: &[MemberStats], clip: f64) -> Result<(), BaselineError> {
    if !(clip > 0.0) {
        return Err(BaselineError::BadClip(clip));
    }
    for (i, m) in stats.iter().enumerate() {
        if m.ratios.is_none() {
            return Err(BaselineError::MissingBehaviorLogprobs(i));
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum StepWeight {
    Cumulative,
    Isolated,
    CumulativeTis { clip: f64 },
}

fn member_step_weights(m: &MemberStats, weight: StepWeight) -> Vec<f64> {
    match weight {
        StepWeight::Cumulative => m.cumulative_w(),
        StepWeight::Isolated => m.w.clone(),
        StepWeight::CumulativeTis { clip } => {
            let ratios = m.ratios.as_ref().expect("checked by check_tis_inputs");
            let weighted: Vec<f64> = m
                .w
                .iter()
                .zip(ratios)
                .map(|(w, rho)| {
                    let clipped = rho.min(clip);
                    clipped * clipped * w
                })
                .collect();
            cumulative(&weighted)
        }
    }
}

fn step_centroid_from_stats(
    stats: &[MemberStats],
    t: usize,
    weight: StepWeight,
    exclude: Option<usize>,
) -> Result<f64, BaselineError> {
    let pairs: Vec<(f64, f64)> = stats
        .iter()
        .enumerate()
        .filter(|(i, m)| m.len() > t && Some(*i) != exclude)
        .map(|(_, m)| (m.g[t], member_step_weights(m, weight)[t]))
        .collect();
    if pairs.is_empty() {
        return Err(BaselineError::NoSurvivors(t));
    }
    Ok(weighted_centroid(pairs.iter().copied())
        .unwrap_or_else(|| mean(pairs.iter().map(|(g, _)| *g))))
}

/// Per-member, per-step advantages under a baseline kind. Trajectory-level
/// kinds broadcast `R - B` over a member's steps; token-level kinds use
/// `G_t - B_t` with the valid-token rule.
pub fn advantages(
    group: &GroupBatch,
    kind: BaselineKind,
    options: &AdvantageOptions,
) -> Result<AdvantageTable, BaselineError> {
    if kind == BaselineKind::ValueOracle {
        let value_fn = options
            .value_fn
            .ok_or(BaselineError::MissingValueFn(kind))?;
        let rows = group
            .members()
            .iter()
            .map(|m| {
                let g = m.reward_to_go();
                (0..m.len())
                    .map(|t| g[t] - value_fn(&m.tokens[..t]))
                    .collect()
            })
            .collect();
        return Ok(AdvantageTable { rows });
    }
    advantages_from_stats(
        &group_stats(group),
        kind,
        options.exclude_self,
        options.tis_clip,
    )
}

/// The stats-level advantage computation shared by the live and replay
/// paths. `ValueOracle` needs prefixes and oracle access, so only
/// [`advantages`] accepts it.
pub fn advantages_from_stats(
    stats: &[MemberStats],
    kind: BaselineKind,
    exclude_self: bool,
    tis_clip: f64,
) -> Result<AdvantageTable, BaselineError> {
    if stats.len() < 2 {
        return Err(BaselineError::GroupTooSmall(stats.len()));
    }
    let n = stats.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    match kind {
        BaselineKind::None => {
            for m in stats {
                rows.push(m.g.clone());
            }
        }
        BaselineKind::Grpo => {
            let b = grpo_from_stats(stats);
            broadcast(stats, &mut rows, |_| b);
        }
        BaselineKind::Rloo => {
            let per_member: Vec<f64> = (0..n)
                .map(|i| rloo_from_stats(stats, i))
                .collect::<Result<_, _>>()?;
            broadcast(stats, &mut rows, |i| per_member[i]);
        }
        BaselineKind::Opo => {
            let b = opo_from_stats(stats);
            broadcast(stats, &mut rows, |_| b);
        }
        BaselineKind::Ogb => {
            if exclude_self {
                let per_member: Vec<f64> =
                    (0..n).map(|i| ogb_from_stats(stats, Some(i))).collect();
                broadcast(stats, &mut rows, |i| per_member[i]);
            } else {
                let b = ogb_from_stats(stats, None);
                broadcast(stats, &mut rows, |_| b);
            }
        }
        BaselineKind::Otb | BaselineKind::OtbIsolated | BaselineKind::OtbTis => {
            let weight = match kind {
                BaselineKind::Otb => StepWeight::Cumulative,
                BaselineKind::OtbIsolated => StepWeight::Isolated,
                BaselineKind::OtbTis => {
                    check_tis_inputs(stats, tis_clip)?;
                    StepWeight::CumulativeTis { clip: tis_clip }
                }
                _ => unreachable!(),
            };
            // One baseline per step, shared by survivors (or per member when
            // excluding self).
            let max_len = stats.iter().map(MemberStats::len).max().unwrap_or(0);
            let mut shared: Vec<f64> = Vec::new();
            if !exclude_self {
                shared = (0..max_len)
                    .map(|t| step_centroid_from_stats(stats, t, weight, None))
                    .collect::<Result<_, _>>()?;
            }
            for (i, m) in stats.iter().enumerate() {
                let row: Result<Vec<f64>, BaselineError> = (0..m.len())
                    .map(|t| {
                        let b = if exclude_self {
                            step_centroid_from_stats(stats, t, weight, Some(i))?
                        } else {
                            shared[t]
                        };
                        Ok(m.g[t] - b)
                    })
                    .collect();
                rows.push(row?);
            }
        }
        BaselineKind::ValueOracle => return Err(BaselineError::MissingValueFn(kind)),
    }
    Ok(AdvantageTable { rows })
}

fn broadcast(stats: &[MemberStats], rows: &mut Vec<Vec<f64>>, baseline: impl Fn(usize) -> f64) {
    for (i, m) in stats.iter().enumerate() {
        let a = m.total_reward() - baseline(i);
        rows.push(vec![a; m.len()]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trajectory with given per-step (dist, token) pairs and a terminal
    /// reward; binary vocabulary unless dists say otherwise.
    fn traj(prompt: u64, steps: Vec<(Vec<f64>, TokenId)>, terminal: f64) -> Trajectory {
        let n = steps.len();
        let mut rewards = vec![0.0; n];
        rewards[n - 1] = terminal;
        let (dists, tokens): (Vec<_>, Vec<_>) = steps.into_iter().unzip();
        Trajectory {
            prompt_id: prompt,
            tokens,
            step_dists: dists,
            rewards,
            behavior_logprobs: None,
        }
    }

    fn uniform2() -> Vec<f64> {
        vec![0.5, 0.5]
    }

    fn group_of(rewards: &[f64], lens: &[usize]) -> GroupBatch {
        let members = rewards
            .iter()
            .zip(lens)
            .map(|(r, len)| {
                let mut steps: Vec<(Vec<f64>, TokenId)> =
                    (0..len - 1).map(|_| (uniform2(), 1)).collect();
                steps.push((uniform2(), 0));
                traj(9, steps, *r)
            })
            .collect();
        GroupBatch::new(members).unwrap()
    }

    #[test]
    fn group_invariants() {
        assert!(matches!(
            GroupBatch::new(vec![traj(0, vec![(uniform2(), 0)], 1.0)]),
            Err(BaselineError::GroupTooSmall(1))
        ));
        let mismatch = vec![
            traj(0, vec![(uniform2(), 0)], 1.0),
            traj(1, vec![(uniform2(), 0)], 1.0),
        ];
        assert!(matches!(
            GroupBatch::new(mismatch),
            Err(BaselineError::PromptMismatch(0, 1))
        ));
    }

    #[test]
    fn grpo_rloo_opo_examples() {
        let g = group_of(&[1.0, 0.0, 0.0, 1.0], &[1, 1, 1, 1]);
        assert!((grpo_baseline(&g) - 0.5).abs() < 1e-15);

        let g2 = group_of(&[1.0, 0.0], &[1, 1]);
        assert!((rloo_baseline(&g2, 0).unwrap() - 0.0).abs() < 1e-15);
        assert!((rloo_baseline(&g2, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!(rloo_baseline(&g2, 2).is_err());

        // Equal lengths: lengths cancel into the plain mean.
        let g3 = group_of(&[1.0, 0.0], &[2, 2]);
        assert!((opo_length_baseline(&g3) - 0.5).abs() < 1e-15);
        // rewards (1, 0), lengths (3, 1): (1*3 + 0*1) / 4 = 0.75.
        let g4 = group_of(&[1.0, 0.0], &[3, 1]);
        assert!((opo_length_baseline(&g4) - 0.75).abs() < 1e-15);

        // Constant rewards: every baseline is that constant.
        let g5 = group_of(&[2.0, 2.0, 2.0], &[1, 2, 3]);
        for b in [
            grpo_baseline(&g5),
            rloo_baseline(&g5, 1).unwrap(),
            opo_length_baseline(&g5),
            ogb_hat(&g5),
        ] {
            assert!((b - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ogb_hat_weighting_and_fallback() {
        // Uniform binary steps give per-step proxy 0.5, so total energy is
        // 0.5 * len: rewards (1, 0) with lengths (6, 2) weight 3:1.
        let g = group_of(&[1.0, 0.0], &[6, 2]);
        assert!((ogb_hat(&g) - 0.75).abs() < 1e-12);

        // One-hot dists carry zero energy: fall back to the plain mean.
        let m1 = traj(0, vec![(vec![0.0, 1.0], 1), (vec![1.0, 0.0], 0)], 1.0);
        let m2 = traj(0, vec![(vec![1.0, 0.0], 0)], 0.0);
        let g = GroupBatch::new(vec![m1, m2]).unwrap();
        assert!((ogb_hat(&g) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn otb_hat_examples() {
        // Two members alive at t=0 with equal weights: plain mean.
        let g = group_of(&[1.0, 0.0], &[2, 2]);
        assert!((otb_hat(&g, 0).unwrap() - 0.5).abs() < 1e-15);

        // Weights (0.9, 0.1) on G = (1, 0) -> 0.9.
        let m1 = traj(0, vec![(vec![0.1, 0.9], 0)], 1.0); // proxy 1 - 2*0.1 + 0.82 = 1.62
        let m2 = traj(0, vec![(vec![0.7, 0.3], 0)], 0.0); // proxy 1 - 1.4 + 0.58 = 0.18
        let g = GroupBatch::new(vec![m1, m2]).unwrap();
        let expect = 1.62 / (1.62 + 0.18);
        assert!((otb_hat(&g, 0).unwrap() - expect).abs() < 1e-12);

        // Survivor rule: only the longer member reaches t=1.
        let g = group_of(&[1.0, 0.0], &[3, 1]);
        assert!((otb_hat(&g, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            otb_hat(&g, 5),
            Err(BaselineError::NoSurvivors(5))
        ));
    }

    #[test]
    fn isolated_uses_single_step_weights() {
        // Step 1 weights differ from cumulative ones.
        let m1 = traj(
            0,
            vec![(vec![0.5, 0.5], 1), (vec![0.1, 0.9], 0)],
            1.0,
        );
        let m2 = traj(
            0,
            vec![(vec![0.5, 0.5], 1), (vec![0.7, 0.3], 0)],
            0.0,
        );
        let g = GroupBatch::new(vec![m1, m2]).unwrap();
        // Both members sample EOS at step 1: w = 1 - 2*dist[0] + ||dist||^2.
        let w1 = 1.0 - 2.0 * 0.1 + (0.01 + 0.81);
        let w2 = 1.0 - 2.0 * 0.7 + (0.49 + 0.09);
        let expect = (1.0 * w1 + 0.0 * w2) / (w1 + w2);
        assert!((otb_isolated_hat(&g, 1).unwrap() - expect).abs() < 1e-12);
        // Equal isolated weights at t=0: plain mean.
        assert!((otb_isolated_hat(&g, 0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tis_weights_use_squared_clipped_ratios() {
        // Hand case: target probs such that rho = (2, 0.5) with c = 1.5
        // turns into weights (1.5^2 w, 0.5^2 w).
        let mk = |p_target: f64, p_behavior: f64, reward: f64| {
            let mut t = traj(0, vec![(vec![1.0 - p_target, p_target], 1)], reward);
            t.behavior_logprobs = Some(vec![p_behavior.ln()]);
            t
        };
        let m1 = mk(0.8, 0.4, 1.0); // rho = 2
        let m2 = mk(0.3, 0.6, 0.0); // rho = 0.5
        let g = GroupBatch::new(vec![m1.clone(), m2.clone()]).unwrap();
        let w1 = 1.5 * 1.5 * m1.step_proxy(0);
        let w2 = 0.5 * 0.5 * m2.step_proxy(0);
        let expect = (1.0 * w1 + 0.0 * w2) / (w1 + w2);
        assert!((otb_tis_hat(&g, 0, 1.5).unwrap() - expect).abs() < 1e-12);

        // Identical policies and c >= 1: reduces to otb_hat.
        let mut a = traj(0, vec![(uniform2(), 1), (uniform2(), 0)], 1.0);
        a.behavior_logprobs = Some((0..2).map(|t| a.sampled_logprob(t)).collect());
        let mut b = traj(0, vec![(vec![0.25, 0.75], 0)], 0.0);
        b.behavior_logprobs = Some(vec![b.sampled_logprob(0)]);
        let g = GroupBatch::new(vec![a, b]).unwrap();
        let plain = otb_hat(&g, 0).unwrap();
        assert!((otb_tis_hat(&g, 0, 2.0).unwrap() - plain).abs() < 1e-12);

        // Tiny c drives every weight under the floor: survivor-mean fallback.
        let fallback = otb_tis_hat(&g, 0, 1e-8).unwrap();
        assert!((fallback - 0.5).abs() < 1e-12);

        // Missing behavior log-probs or nonpositive clip are errors.
        let bare = group_of(&[1.0, 0.0], &[1, 1]);
        assert!(matches!(
            otb_tis_hat(&bare, 0, 2.0),
            Err(BaselineError::MissingBehaviorLogprobs(0))
        ));
        assert!(matches!(
            otb_tis_hat(&g, 0, 0.0),
            Err(BaselineError::BadClip(_))
        ));
    }

    #[test]
    fn advantage_tables_by_kind() {
        let g = group_of(&[1.0, 0.0], &[3, 2]);
        let opts = AdvantageOptions::default();

        // Trajectory-level: one shared advantage per member row.
        let table = advantages(&g, BaselineKind::Ogb, &opts).unwrap();
        for (row, m) in table.rows.iter().zip(g.members()) {
            assert_eq!(row.len(), m.len());
            for a in row {
                assert!((a - row[0]).abs() < 1e-15);
            }
        }

        // Token-level OTB on diverging profiles: advantages vary within a
        // member row.
        let m1 = traj(
            0,
            vec![(vec![0.5, 0.5], 1), (vec![0.02, 0.98], 0)],
            1.0,
        );
        let m2 = traj(
            0,
            vec![(vec![0.5, 0.5], 1), (vec![0.6, 0.4], 0)],
            0.0,
        );
        let g2 = GroupBatch::new(vec![m1, m2]).unwrap();
        let table = advantages(&g2, BaselineKind::Otb, &opts).unwrap();
        let row = &table.rows[0];
        assert!((row[0] - row[1]).abs() > 1e-6);

        // Single-step group: OTB and OGB tables coincide.
        let g3 = group_of(&[1.0, 0.0], &[1, 1]);
        let otb = advantages(&g3, BaselineKind::Otb, &opts).unwrap();
        let ogb = advantages(&g3, BaselineKind::Ogb, &opts).unwrap();
        for (a, b) in otb.rows.iter().flatten().zip(ogb.rows.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Value kind requires the oracle hook.
        assert!(matches!(
            advantages(&g3, BaselineKind::ValueOracle, &opts),
            Err(BaselineError::MissingValueFn(_))
        ));
        let value = |_prefix: &[TokenId]| 0.5;
        let table = advantages(
            &g3,
            BaselineKind::ValueOracle,
            &AdvantageOptions {
                value_fn: Some(&value),
                ..AdvantageOptions::default()
            },
        )
        .unwrap();
        assert!((table.rows[0][0] - 0.5).abs() < 1e-15);
        assert!((table.rows[1][0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn exclude_self_changes_weighted_baselines() {
        let g = group_of(&[1.0, 0.0, 0.5], &[2, 2, 2]);
        let include = advantages(&g, BaselineKind::Otb, &AdvantageOptions::default()).unwrap();
        let exclude = advantages(
            &g,
            BaselineKind::Otb,
            &AdvantageOptions {
                exclude_self: true,
                ..AdvantageOptions::default()
            },
        )
        .unwrap();
        // Leave-one-out baselines shift every member's advantage.
        assert!((include.rows[0][0] - exclude.rows[0][0]).abs() > 1e-9);
    }

    #[test]
    fn centroid_stays_within_input_range() {
        let g = group_of(&[1.0, -0.5, 0.25], &[2, 3, 1]);
        let bounds = (-0.5 - 1e-12)..=(1.0 + 1e-12);
        for b in [grpo_baseline(&g), opo_length_baseline(&g), ogb_hat(&g)] {
            assert!(bounds.contains(&b));
        }
        let b = otb_hat(&g, 0).unwrap();
        assert!(bounds.contains(&b));
    }
}
