//! Trajectories, rule-based reward models, reward-to-go, and realized
//! energy profiles.

use serde::{Deserialize, Serialize};

use crate::policy::{proxy_from_dist, proxy_from_parts, TokenId, EOS};

/// Rewards produced by the models here stay inside this bound, which keeps
/// oracle variance magnitudes numerically tame.
pub const REWARD_BOUND: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("tokens must be nonempty")]
    EmptyTokens,
    #[error("reward magnitude {0} exceeds bound {REWARD_BOUND}")]
    RewardOutOfBounds(f64),
    #[error("dense reward table has {got} entries, vocabulary needs {want}")]
    TableSizeMismatch { got: usize, want: usize },
    #[error("pattern must be nonempty")]
    EmptyPattern,
    #[error("trajectory field lengths disagree: tokens {tokens}, dists {dists}, rewards {rewards}")]
    LengthMismatch {
        tokens: usize,
        dists: usize,
        rewards: usize,
    },
    #[error("step distribution at {step} sums to {sum}, expected 1")]
    UnnormalizedDist { step: usize, sum: f64 },
    #[error("trajectory does not end with EOS before the horizon")]
    MissingEos,
    #[error("log record needs either `dists` or both `sampled_probs` and `dist_sq_norms`")]
    IncompleteLogRecord,
}

/// One rolled-out response: the sampled tokens plus, at every step, the full
/// next-token distribution and the per-step reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub tokens: Vec<TokenId>,
    pub step_dists: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Sampled-token log-probabilities under a behavior policy, present in
    /// off-policy mode.
    pub behavior_logprobs: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Probability the recording policy assigned to the token it sampled at
    /// step `t`.
    pub fn sampled_prob(&self, t: usize) -> f64 {
        self.step_dists[t][self.tokens[t] as usize]
    }

    pub fn sampled_logprob(&self, t: usize) -> f64 {
        self.sampled_prob(t).ln()
    }

    pub fn log_prob_sum(&self) -> f64 {
        (0..self.len()).map(|t| self.sampled_logprob(t)).sum()
    }

    /// Reward-to-go `G_t` for every step.
    pub fn reward_to_go(&self) -> Vec<f64> {
        reward_to_go(&self.rewards)
    }

    /// Cumulative logit-proxy energy profile `W_t`.
    pub fn energy_profile(&self) -> Vec<f64> {
        realized_energy_profile(self)
    }

    /// Per-step proxy weight `w_t` at one step.
    pub fn step_proxy(&self, t: usize) -> f64 {
        proxy_from_dist(&self.step_dists[t], self.tokens[t])
    }

    /// Structural invariants: aligned lengths, normalized distributions, and
    /// EOS termination unless the horizon was hit.
    pub fn validate(&self, t_max: usize) -> Result<(), RewardError> {
        if self.tokens.is_empty() {
            return Err(RewardError::EmptyTokens);
        }
        if self.tokens.len() != self.step_dists.len() || self.tokens.len() != self.rewards.len() {
            return Err(RewardError::LengthMismatch {
                tokens: self.tokens.len(),
                dists: self.step_dists.len(),
                rewards: self.rewards.len(),
            });
        }
        for (step, dist) in self.step_dists.iter().enumerate() {
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(RewardError::UnnormalizedDist { step, sum });
            }
        }
        if *self.tokens.last().unwrap() != EOS && self.tokens.len() != t_max {
            return Err(RewardError::MissingEos);
        }
        Ok(())
    }

    /// Serializable one-line form for the record/replay log. Keeps the two
    /// scalars per step that suffice to rebuild the proxy profile instead of
    /// the full distributions.
    pub fn to_log_record(&self) -> TrajectoryLogRecord {
        TrajectoryLogRecord {
            prompt_id: self.prompt_id,
            tokens: self.tokens.clone(),
            rewards: self.rewards.clone(),
            dists: None,
            sampled_probs: Some((0..self.len()).map(|t| self.sampled_prob(t)).collect()),
            dist_sq_norms: Some(
                self.step_dists
                    .iter()
                    .map(|d| d.iter().map(|p| p * p).sum())
                    .collect(),
            ),
            energy_profile: Some(self.energy_profile()),
            behavior_logprobs: self.behavior_logprobs.clone(),
        }
    }
}

/// One trajectory as one JSON object per log line. Either `dists` or the
/// pair (`sampled_probs`, `dist_sq_norms`) must be present; the pair is what
/// the proxy weights need.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryLogRecord {
    pub prompt_id: u64,
    pub tokens: Vec<TokenId>,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dists: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_sq_norms: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_profile: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_logprobs: Option<Vec<f64>>,
}

impl TrajectoryLogRecord {
    /// Per-step proxy weights recomputed from logged probabilities only.
    pub fn proxy_weights(&self) -> Result<Vec<f64>, RewardError> {
        if self.tokens.is_empty() {
            return Err(RewardError::EmptyTokens);
        }
        if let Some(dists) = &self.dists {
            if dists.len() != self.tokens.len() {
                return Err(RewardError::LengthMismatch {
                    tokens: self.tokens.len(),
                    dists: dists.len(),
                    rewards: self.rewards.len(),
                });
            }
            return Ok(self
                .tokens
                .iter()
                .zip(dists)
                .map(|(tok, d)| proxy_from_dist(d, *tok))
                .collect());
        }
        match (&self.sampled_probs, &self.dist_sq_norms) {
            (Some(probs), Some(sq)) if probs.len() == self.tokens.len() && sq.len() == probs.len() => {
                Ok(probs
                    .iter()
                    .zip(sq)
                    .map(|(p, s)| proxy_from_parts(*p, *s))
                    .collect())
            }
            _ => Err(RewardError::IncompleteLogRecord),
        }
    }

    /// Cumulative energy profile from the logged probabilities.
    pub fn proxy_profile(&self) -> Result<Vec<f64>, RewardError> {
        Ok(cumulative(&self.proxy_weights()?))
    }
}

/// Deterministic reward models. Terminal kinds place all reward mass on the
/// final step; the dense kind is a per-token-id table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardModel {
    /// Reward on the final step when the target token appears anywhere.
    TerminalTarget { target: TokenId, reward: f64 },
    /// Reward on the final step when the pattern occurs as a contiguous
    /// subsequence, a cheap stand-in for rule-based verifiers.
    TerminalPattern { pattern: Vec<TokenId>, reward: f64 },
    /// Per-step reward r(v) looked up per emitted token.
    DensePerStep { table: Vec<f64> },
}

impl RewardModel {
    pub fn validate(&self, vocab_size: usize) -> Result<(), RewardError> {
        match self {
            RewardModel::TerminalTarget { reward, .. } => check_bound(*reward),
            RewardModel::TerminalPattern { pattern, reward } => {
                if pattern.is_empty() {
                    return Err(RewardError::EmptyPattern);
                }
                check_bound(*reward)
            }
            RewardModel::DensePerStep { table } => {
                if table.len() != vocab_size {
                    return Err(RewardError::TableSizeMismatch {
                        got: table.len(),
                        want: vocab_size,
                    });
                }
                table.iter().try_for_each(|r| check_bound(*r))
            }
        }
    }

    /// Per-step reward sequence for a token sequence.
    pub fn score(&self, tokens: &[TokenId]) -> Vec<f64> {
        score_rewards(self, tokens)
    }

    /// Overwrite a trajectory's rewards in place.
    pub fn apply(&self, traj: &mut Trajectory) {
        traj.rewards = self.score(&traj.tokens);
    }
}

fn check_bound(r: f64) -> Result<(), RewardError> {
    if r.is_finite() && r.abs() <= REWARD_BOUND {
        Ok(())
    } else {
        Err(RewardError::RewardOutOfBounds(r))
    }
}

/// Per-step rewards for a token sequence under a reward model. For terminal
/// kinds every entry except the last is zero.
pub fn score_rewards(model: &RewardModel, tokens: &[TokenId]) -> Vec<f64> {
    assert!(!tokens.is_empty(), "tokens must be nonempty");
    let mut rewards = vec![0.0; tokens.len()];
    match model {
        RewardModel::TerminalTarget { target, reward } => {
            if tokens.contains(target) {
                rewards[tokens.len() - 1] = *reward;
            }
        }
        RewardModel::TerminalPattern { pattern, reward } => {
            if !pattern.is_empty()
                && tokens.len() >= pattern.len()
                && tokens.windows(pattern.len()).any(|w| w == &pattern[..])
            {
                rewards[tokens.len() - 1] = *reward;
            }
        }
        RewardModel::DensePerStep { table } => {
            for (r, tok) in rewards.iter_mut().zip(tokens) {
                *r = table[*tok as usize];
            }
        }
    }
    rewards
}

/// Reward-to-go `G_t = sum_{k >= t} r_k` via the suffix-sum recurrence.
pub fn reward_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (slot, r) in g.iter_mut().zip(rewards).rev() {
        acc += r;
        *slot = acc;
    }
    g
}

/// Cumulative proxy energy profile `W_t = sum_{j <= t} w_j` of a trajectory,
/// computed from its recorded distributions. Nondecreasing since every
/// `w_j >= 0`.
pub fn realized_energy_profile(traj: &Trajectory) -> Vec<f64> {
    let weights: Vec<f64> = (0..traj.len()).map(|t| traj.step_proxy(t)).collect();
    cumulative(&weights)
}

pub(crate) fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}
