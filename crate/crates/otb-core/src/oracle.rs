//! Exhaustive trajectory enumeration and exact expectations.
//!
//! [`EnumeratedSpace`] lists every trajectory a policy can emit for one
//! prompt together with its probability, and caches the per-step score
//! functions. On top of it sit the exact quantities every estimator is
//! tested against: the true gradient (causal and non-causal routes), the
//! optimal global/token/isolated/value baselines, the per-step
//! least-squares objective, and exact estimator variance.
//!
//! Per-step expectations follow the valid-token rule: the expectation at
//! step `t` runs over trajectories of length `> t` (0-based indices
//! throughout). Summation order is fixed by enumeration order, so repeated
//! runs are bit-stable.

use rand_core::RngCore;

use crate::baselines::{GroupBatch, WEIGHT_FLOOR};
use crate::policy::{unit_f64, GradVec, PolicyError, PolicyParams, StepScore, TokenId, Vocab, EOS};
use crate::rewards::{reward_to_go, RewardModel, Trajectory};

/// Hard cap on the number of enumerated trajectories.
pub const ENUMERATION_CAP: usize = 2_000_000;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("state space too large: {bound} trajectories exceed the cap of {cap}")]
    StateSpaceTooLarge { bound: u128, cap: usize },
    #[error("zero-energy space: every trajectory has zero total score norm")]
    ZeroEnergySpace,
    #[error("no trajectory survives to step {0}")]
    NoSurvivors(usize),
    #[error("zero denominator at step {0}: surviving trajectories carry no energy")]
    ZeroDenominator(usize),
    #[error("prefix {0:?} is unreachable")]
    UnreachablePrefix(Vec<TokenId>),
    #[error("schedule has {got} entries, horizon needs {want}")]
    ScheduleTooShort { got: usize, want: usize },
    #[error("group member {member} ended before step {step}")]
    GroupMemberDead { member: usize, step: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Per-step baseline values `B_t`, `t = 0..t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSchedule {
    pub values: Vec<f64>,
}

impl BaselineSchedule {
    pub fn zeros(t_max: usize) -> Self {
        Self {
            values: vec![0.0; t_max],
        }
    }

    pub fn constant(b: f64, t_max: usize) -> Self {
        Self {
            values: vec![b; t_max],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

struct SpaceEntry {
    traj: Trajectory,
    prob: f64,
    scores: Vec<StepScore>,
    /// Exact per-step squared score norms and their cumulative sums.
    step_energy: Vec<f64>,
    cum_energy: Vec<f64>,
}

/// The complete trajectory distribution of one policy on one prompt.
pub struct EnumeratedSpace {
    params: PolicyParams,
    prompt_id: u64,
    t_max: usize,
    entries: Vec<SpaceEntry>,
}

impl EnumeratedSpace {
    /// Exhaustively enumerate every trajectory of length `<= t_max` (each
    /// ends at EOS or at the horizon). The stored trajectories carry zero
    /// rewards and their own sampled log-probabilities as
    /// `behavior_logprobs`, so the same space can serve as a behavior
    /// distribution in off-policy checks.
    pub fn enumerate(
        params: &PolicyParams,
        prompt_id: u64,
        t_max: usize,
    ) -> Result<Self, OracleError> {
        let vocab = params.vocab().size() as u128;
        let mut bound: u128 = 0;
        let mut pow: u128 = 1; // (V-1)^(L-1)
        for _ in 1..=t_max {
            bound = bound.saturating_add(pow);
            pow = pow.saturating_mul(vocab - 1);
        }
        bound = bound.saturating_add(pow);
        if bound > ENUMERATION_CAP as u128 {
            return Err(OracleError::StateSpaceTooLarge {
                bound,
                cap: ENUMERATION_CAP,
            });
        }

        let mut space = Self {
            params: params.clone(),
            prompt_id,
            t_max,
            entries: Vec::new(),
        };
        let mut tokens = Vec::new();
        let mut dists = Vec::new();
        space.walk(&mut tokens, &mut dists, 1.0)?;
        Ok(space)
    }

    fn walk(
        &mut self,
        tokens: &mut Vec<TokenId>,
        dists: &mut Vec<Vec<f64>>,
        prob: f64,
    ) -> Result<(), OracleError> {
        let dist = self.params.next_token_dist(tokens)?;
        for token in self.params.vocab().tokens() {
            let p = dist[token as usize];
            tokens.push(token);
            dists.push(dist.clone());
            if token == EOS || tokens.len() == self.t_max {
                self.push_leaf(tokens, dists, prob * p)?;
            } else {
                self.walk(tokens, dists, prob * p)?;
            }
            tokens.pop();
            dists.pop();
        }
        Ok(())
    }

    fn push_leaf(
        &mut self,
        tokens: &[TokenId],
        dists: &[Vec<f64>],
        prob: f64,
    ) -> Result<(), OracleError> {
        if self.entries.len() >= ENUMERATION_CAP {
            return Err(OracleError::StateSpaceTooLarge {
                bound: self.entries.len() as u128 + 1,
                cap: ENUMERATION_CAP,
            });
        }
        let mut scores = Vec::with_capacity(tokens.len());
        for (t, token) in tokens.iter().enumerate() {
            scores.push(
                self.params
                    .step_score_given_dist(&tokens[..t], &dists[t], *token)?,
            );
        }
        let step_energy: Vec<f64> = scores.iter().map(StepScore::norm_sq).collect();
        let cum_energy = crate::rewards::cumulative(&step_energy);
        let behavior_logprobs = tokens
            .iter()
            .enumerate()
            .map(|(t, token)| dists[t][*token as usize].ln())
            .collect();
        let traj = Trajectory {
            prompt_id: self.prompt_id,
            tokens: tokens.to_vec(),
            step_dists: dists.to_vec(),
            rewards: vec![0.0; tokens.len()],
            behavior_logprobs: Some(behavior_logprobs),
        };
        self.entries.push(SpaceEntry {
            traj,
            prob,
            scores,
            step_energy,
            cum_energy,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn prompt_id(&self) -> u64 {
        self.prompt_id
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn total_probability(&self) -> f64 {
        self.entries.iter().map(|e| e.prob).sum()
    }

    pub fn probability(&self, i: usize) -> f64 {
        self.entries[i].prob
    }

    pub fn trajectory(&self, i: usize) -> &Trajectory {
        &self.entries[i].traj
    }

    /// Exact cumulative energy `W_t` of one trajectory (parameter-space
    /// score norms, not the proxy).
    pub fn cumulative_energy(&self, i: usize) -> &[f64] {
        &self.entries[i].cum_energy
    }

    /// Clone of trajectory `i` with rewards from `model` filled in.
    pub fn rewarded_trajectory(&self, i: usize, model: &RewardModel) -> Trajectory {
        let mut t = self.entries[i].traj.clone();
        model.apply(&mut t);
        t
    }

    pub fn expected_reward(&self, model: &RewardModel) -> f64 {
        self.entries
            .iter()
            .map(|e| e.prob * model.score(&e.traj.tokens).iter().sum::<f64>())
            .sum()
    }

    /// Largest total reward over the support: the expected reward a
    /// deterministic policy could extract, used as the training optimum.
    pub fn max_reward(&self, model: &RewardModel) -> f64 {
        self.entries
            .iter()
            .map(|e| model.score(&e.traj.tokens).iter().sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn returns(&self, e: &SpaceEntry, model: &RewardModel) -> Vec<f64> {
        reward_to_go(&model.score(&e.traj.tokens))
    }

    /// True policy gradient via the causal route `E[sum_t s_t G_t]`.
    pub fn true_gradient(&self, model: &RewardModel) -> GradVec {
        let mut acc = GradVec::zeros(self.params.param_count());
        for e in &self.entries {
            let g = self.returns(e, model);
            for (t, s) in e.scores.iter().enumerate() {
                s.add_scaled_into(acc.as_mut_slice(), e.prob * g[t]);
            }
        }
        acc
    }

    /// True policy gradient via the non-causal route `E[R(tau) S(tau)]`.
    pub fn true_gradient_noncausal(&self, model: &RewardModel) -> GradVec {
        let mut acc = GradVec::zeros(self.params.param_count());
        for e in &self.entries {
            let r: f64 = model.score(&e.traj.tokens).iter().sum();
            for s in &e.scores {
                s.add_scaled_into(acc.as_mut_slice(), e.prob * r);
            }
        }
        acc
    }

    /// Total-energy-weighted reward centroid
    /// `E[R ||S||^2] / E[||S||^2]` with exact parameter-space norms.
    pub fn exact_ogb(&self, model: &RewardModel) -> Result<f64, OracleError> {
        let mut num = 0.0;
        let mut den = 0.0;
        for e in &self.entries {
            let total_sq = total_score_norm_sq(e);
            let r: f64 = model.score(&e.traj.tokens).iter().sum();
            num += e.prob * r * total_sq;
            den += e.prob * total_sq;
        }
        if den <= 0.0 {
            return Err(OracleError::ZeroEnergySpace);
        }
        Ok(num / den)
    }

    /// Length-weighted reward centroid `E[R T] / E[T]`, the oracle
    /// analogue of the sequence-length baseline.
    pub fn exact_length_baseline(&self, model: &RewardModel) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for e in &self.entries {
            let r: f64 = model.score(&e.traj.tokens).iter().sum();
            num += e.prob * r * e.traj.len() as f64;
            den += e.prob * e.traj.len() as f64;
        }
        num / den
    }

    /// Cumulative-energy-weighted centroid of reward-to-go at step `t`,
    /// over surviving trajectories: `E[G_t W_t] / E[W_t]`.
    pub fn exact_otb(&self, model: &RewardModel, t: usize) -> Result<f64, OracleError> {
        self.step_centroid(model, t, |e| e.cum_energy[t])
    }

    /// Like [`Self::exact_otb`] with the single-step weight `||s_t||^2`.
    pub fn exact_isolated_baseline(
        &self,
        model: &RewardModel,
        t: usize,
    ) -> Result<f64, OracleError> {
        self.step_centroid(model, t, |e| e.step_energy[t])
    }

    fn step_centroid(
        &self,
        model: &RewardModel,
        t: usize,
        weight: impl Fn(&SpaceEntry) -> f64,
    ) -> Result<f64, OracleError> {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut survivors = false;
        for e in &self.entries {
            if e.traj.len() <= t {
                continue;
            }
            survivors = true;
            let w = e.prob * weight(e);
            num += w * self.returns(e, model)[t];
            den += w;
        }
        if !survivors {
            return Err(OracleError::NoSurvivors(t));
        }
        if den <= 0.0 {
            return Err(OracleError::ZeroDenominator(t));
        }
        Ok(num / den)
    }

    /// Conditional expectation of `G_t` given a prefix `y_{<t}`
    /// (`t = prefix.len()`): the exact value function.
    pub fn exact_value_baseline(
        &self,
        model: &RewardModel,
        prefix: &[TokenId],
    ) -> Result<f64, OracleError> {
        let t = prefix.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for e in &self.entries {
            if e.traj.len() <= t || &e.traj.tokens[..t] != prefix {
                continue;
            }
            num += e.prob * self.returns(e, model)[t];
            den += e.prob;
        }
        if den <= 0.0 {
            return Err(OracleError::UnreachablePrefix(prefix.to_vec()));
        }
        Ok(num / den)
    }

    /// `E[W_t 1{alive}]`: the coefficient that makes the per-step objective
    /// strictly convex in `B_t`.
    pub fn step_energy_expectation(&self, t: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.traj.len() > t)
            .map(|e| e.prob * e.cum_energy[t])
            .sum()
    }

    /// `E[W_t (G_t - b) 1{alive}]`: zero at the exact per-step optimum.
    pub fn j_residual(&self, model: &RewardModel, t: usize, b: f64) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.traj.len() > t)
            .map(|e| e.prob * e.cum_energy[t] * (self.returns(e, model)[t] - b))
            .sum()
    }

    /// Full OTB schedule; steps with no survivors or no energy get 0 (they
    /// never weight an estimator term).
    pub fn otb_schedule(&self, model: &RewardModel) -> BaselineSchedule {
        self.schedule_of(|t| self.exact_otb(model, t))
    }

    pub fn isolated_schedule(&self, model: &RewardModel) -> BaselineSchedule {
        self.schedule_of(|t| self.exact_isolated_baseline(model, t))
    }

    /// Survivor-probability-weighted mean of `G_t` per step.
    pub fn mean_g_schedule(&self, model: &RewardModel) -> BaselineSchedule {
        let values = (0..self.t_max)
            .map(|t| {
                let mut num = 0.0;
                let mut den = 0.0;
                for e in &self.entries {
                    if e.traj.len() > t {
                        num += e.prob * self.returns(e, model)[t];
                        den += e.prob;
                    }
                }
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            })
            .collect();
        BaselineSchedule { values }
    }

    /// Per-step schedule obtained by averaging the exact value function over
    /// reachable prefixes. Equals [`Self::mean_g_schedule`] by the law of
    /// total expectation; computed through the per-prefix route on purpose.
    pub fn value_schedule(&self, model: &RewardModel) -> BaselineSchedule {
        let mut values = Vec::with_capacity(self.t_max);
        for t in 0..self.t_max {
            let mut prefixes: Vec<(&[TokenId], f64)> = Vec::new();
            for e in &self.entries {
                if e.traj.len() <= t {
                    continue;
                }
                let prefix = &e.traj.tokens[..t];
                match prefixes.iter_mut().find(|(p, _)| *p == prefix) {
                    Some((_, mass)) => *mass += e.prob,
                    None => prefixes.push((prefix, e.prob)),
                }
            }
            let total: f64 = prefixes.iter().map(|(_, m)| m).sum();
            if total <= 0.0 {
                values.push(0.0);
                continue;
            }
            let mut acc = 0.0;
            for (prefix, mass) in &prefixes {
                acc += mass / total
                    * self
                        .exact_value_baseline(model, prefix)
                        .expect("prefix has positive mass");
            }
            values.push(acc);
        }
        BaselineSchedule { values }
    }

    fn schedule_of(
        &self,
        f: impl Fn(usize) -> Result<f64, OracleError>,
    ) -> BaselineSchedule {
        BaselineSchedule {
            values: (0..self.t_max).map(|t| f(t).unwrap_or(0.0)).collect(),
        }
    }

    /// The per-step least-squares objective summed over the horizon:
    /// `sum_t E[W_t (G_t - B_t)^2 1{alive}]`.
    pub fn objective_j(
        &self,
        model: &RewardModel,
        schedule: &BaselineSchedule,
    ) -> Result<f64, OracleError> {
        self.check_schedule(schedule)?;
        Ok(self.objective_j_with(model, |_, t| schedule.values[t]))
    }

    /// Same objective for an arbitrary (possibly prefix-dependent) baseline.
    pub fn objective_j_with(
        &self,
        model: &RewardModel,
        baseline: impl Fn(&Trajectory, usize) -> f64,
    ) -> f64 {
        let mut j = 0.0;
        for e in &self.entries {
            if e.prob == 0.0 {
                continue;
            }
            let g = self.returns(e, model);
            for t in 0..e.traj.len() {
                let d = g[t] - baseline(&e.traj, t);
                j += e.prob * e.cum_energy[t] * d * d;
            }
        }
        j
    }

    fn check_schedule(&self, schedule: &BaselineSchedule) -> Result<(), OracleError> {
        if schedule.len() < self.t_max {
            return Err(OracleError::ScheduleTooShort {
                got: schedule.len(),
                want: self.t_max,
            });
        }
        Ok(())
    }

    /// Enumeration mean of the causal estimator
    /// `sum_t s_t (G_t - b(tau, t))` for an arbitrary per-step baseline.
    pub fn mean_causal_gradient(
        &self,
        model: &RewardModel,
        baseline: impl Fn(&Trajectory, usize) -> f64,
    ) -> GradVec {
        let mut acc = GradVec::zeros(self.params.param_count());
        for e in &self.entries {
            if e.prob == 0.0 {
                continue;
            }
            let g = self.returns(e, model);
            for (t, s) in e.scores.iter().enumerate() {
                let a = g[t] - baseline(&e.traj, t);
                s.add_scaled_into(acc.as_mut_slice(), e.prob * a);
            }
        }
        acc
    }

    /// Enumeration mean of an arbitrary estimator. The closure receives the
    /// trajectory with rewards applied.
    pub fn mean_gradient_of(
        &self,
        model: &RewardModel,
        grad: impl Fn(&Trajectory) -> GradVec,
    ) -> GradVec {
        let mut acc = GradVec::zeros(self.params.param_count());
        for (i, e) in self.entries.iter().enumerate() {
            if e.prob == 0.0 {
                continue;
            }
            acc.axpy(e.prob, &grad(&self.rewarded_trajectory(i, model)));
        }
        acc
    }

    /// Exact variance `E[||g||^2] - ||E[g]||^2` of an arbitrary
    /// deterministic estimator over this distribution.
    pub fn exact_estimator_variance(
        &self,
        model: &RewardModel,
        grad: impl Fn(&Trajectory) -> GradVec,
    ) -> f64 {
        let mut mean = GradVec::zeros(self.params.param_count());
        let mut second = 0.0;
        for (i, e) in self.entries.iter().enumerate() {
            if e.prob == 0.0 {
                continue;
            }
            let g = grad(&self.rewarded_trajectory(i, model));
            second += e.prob * g.norm_sq();
            mean.axpy(e.prob, &g);
        }
        (second - mean.norm_sq()).max(0.0)
    }

    /// Exact variance of the causal estimator under a per-step baseline,
    /// computed from the cached score vectors.
    pub fn causal_variance(
        &self,
        model: &RewardModel,
        baseline: impl Fn(&Trajectory, usize) -> f64,
    ) -> f64 {
        let mut mean = GradVec::zeros(self.params.param_count());
        let mut second = 0.0;
        for e in &self.entries {
            if e.prob == 0.0 {
                continue;
            }
            let g = self.returns(e, model);
            let adv: Vec<f64> = (0..e.traj.len())
                .map(|t| g[t] - baseline(&e.traj, t))
                .collect();
            // ||sum_t a_t s_t||^2 via pairwise span-aware dots.
            let mut norm_sq = 0.0;
            for (t, st) in e.scores.iter().enumerate() {
                norm_sq += adv[t] * adv[t] * e.step_energy[t];
                for (k, sk) in e.scores.iter().enumerate().skip(t + 1) {
                    norm_sq += 2.0 * adv[t] * adv[k] * st.dot(sk);
                }
                st.add_scaled_into(mean.as_mut_slice(), e.prob * adv[t]);
            }
            second += e.prob * norm_sq;
        }
        (second - mean.norm_sq()).max(0.0)
    }

    /// Exact evaluation of the coupled-step optimal baseline at step `t`:
    ///
    /// `B_t = (E[G_t ||s_t||^2] + sum_{k != t} E[(G_k - B_k) <s_k, s_t>]) / E[||s_t||^2]`.
    ///
    /// With `schedule = None` the `B_k` terms are dropped, which changes
    /// nothing in exact arithmetic: `E[B_k <s_k, s_t>] = 0` for any fixed
    /// schedule because scores have zero conditional mean.
    pub fn theoretical_otb(
        &self,
        model: &RewardModel,
        t: usize,
        schedule: Option<&BaselineSchedule>,
    ) -> Result<f64, OracleError> {
        if let Some(s) = schedule {
            self.check_schedule(s)?;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        let mut survivors = false;
        for e in &self.entries {
            if e.traj.len() <= t {
                continue;
            }
            survivors = true;
            let g = self.returns(e, model);
            den += e.prob * e.step_energy[t];
            num += e.prob * g[t] * e.step_energy[t];
            for k in 0..e.traj.len() {
                if k == t {
                    continue;
                }
                let b_k = schedule.map_or(0.0, |s| s.values[k]);
                num += e.prob * (g[k] - b_k) * e.scores[k].dot(&e.scores[t]);
            }
        }
        if !survivors {
            return Err(OracleError::NoSurvivors(t));
        }
        if den <= 0.0 {
            return Err(OracleError::ZeroDenominator(t));
        }
        Ok(num / den)
    }

    /// First-order optimality residual of the causal estimator at step `t`:
    /// `E[<g_c, s_t>]` under the given schedule. Zero when `B_t` solves the
    /// coupled system exactly.
    pub fn stationarity_residual(
        &self,
        model: &RewardModel,
        schedule: &BaselineSchedule,
        t: usize,
    ) -> Result<f64, OracleError> {
        self.check_schedule(schedule)?;
        let mut acc = 0.0;
        for e in &self.entries {
            if e.traj.len() <= t {
                continue;
            }
            let g = self.returns(e, model);
            for k in 0..e.traj.len() {
                acc += e.prob * (g[k] - schedule.values[k]) * e.scores[k].dot(&e.scores[t]);
            }
        }
        Ok(acc)
    }
}

fn total_score_norm_sq(e: &SpaceEntry) -> f64 {
    let mut norm_sq: f64 = e.step_energy.iter().sum();
    for (t, st) in e.scores.iter().enumerate() {
        for sk in e.scores.iter().skip(t + 1) {
            norm_sq += 2.0 * st.dot(sk);
        }
    }
    norm_sq
}

/// Both sides of the convex split of the full-trajectory baseline at step
/// `t`, plus the mixing coefficient.
#[derive(Debug, Clone, Copy)]
pub struct ConvexCheck {
    /// Full-trajectory-energy-weighted centroid of `G_t`.
    pub lhs: f64,
    /// `alpha * B^{W_t} + (1 - alpha) * mean(G_t)`.
    pub rhs: f64,
    pub alpha: f64,
    /// Causal energy-weighted baseline `B^{W_t}`.
    pub causal_baseline: f64,
    /// Plain member mean of `G_t`.
    pub mean_g: f64,
    /// Largest deviation of a member's future energy from the group mean.
    pub max_future_deviation: f64,
    /// Whether the future-energy homogeneity assumption holds to 1e-9.
    pub homogeneous: bool,
}

/// Evaluate the convex decomposition of the full-trajectory baseline on a
/// group whose members are all alive at `t`. Violated homogeneity is
/// flagged, not an error.
pub fn convex_decomposition_check(
    group: &GroupBatch,
    t: usize,
) -> Result<ConvexCheck, OracleError> {
    for (i, m) in group.members().iter().enumerate() {
        if m.len() <= t {
            return Err(OracleError::GroupMemberDead { member: i, step: t });
        }
    }
    let n = group.len() as f64;
    let data: Vec<(f64, f64, f64)> = group
        .members()
        .iter()
        .map(|m| {
            let profile = m.energy_profile();
            let w_t = profile[t];
            let w_total = *profile.last().unwrap();
            (m.reward_to_go()[t], w_t, w_total - w_t)
        })
        .collect();

    let mean_g = data.iter().map(|(g, _, _)| g).sum::<f64>() / n;
    let mean_w_t = data.iter().map(|(_, w, _)| w).sum::<f64>() / n;
    let mean_w_future = data.iter().map(|(_, _, f)| f).sum::<f64>() / n;
    let max_future_deviation = data
        .iter()
        .map(|(_, _, f)| (f - mean_w_future).abs())
        .fold(0.0, f64::max);

    let lhs = centroid_or_mean(data.iter().map(|(g, w, f)| (*g, w + f)), mean_g);
    let causal_baseline = centroid_or_mean(data.iter().map(|(g, w, _)| (*g, *w)), mean_g);
    let alpha = if mean_w_t + mean_w_future <= WEIGHT_FLOOR {
        0.0
    } else {
        mean_w_t / (mean_w_t + mean_w_future)
    };
    let rhs = alpha * causal_baseline + (1.0 - alpha) * mean_g;
    Ok(ConvexCheck {
        lhs,
        rhs,
        alpha,
        causal_baseline,
        mean_g,
        max_future_deviation,
        homogeneous: max_future_deviation <= 1e-9,
    })
}

fn centroid_or_mean(pairs: impl Iterator<Item = (f64, f64)> + Clone, mean: f64) -> f64 {
    let wsum: f64 = pairs.clone().map(|(_, w)| w).sum();
    if wsum <= WEIGHT_FLOOR {
        mean
    } else {
        pairs.map(|(g, w)| g * w).sum::<f64>() / wsum
    }
}

/// Recipe for a group with exactly homogeneous future energy: members
/// differ over their first `prefix_len` steps and share one literal suffix
/// (distributions and tokens), ending in EOS.
#[derive(Debug, Clone, Copy)]
pub struct HomogeneousGroupSpec {
    pub vocab: Vocab,
    pub members: usize,
    /// Steps before the split; the decomposition is checked at
    /// `t = prefix_len - 1`.
    pub prefix_len: usize,
    /// Steps after the split, at least 1 (the shared EOS).
    pub suffix_len: usize,
    /// One-hot prefix distributions force `W_t = 0` (the alpha = 0 boundary).
    pub deterministic_prefix: bool,
    /// One-hot suffix distributions force `W_{>t} = 0` (the alpha = 1 boundary).
    pub deterministic_suffix: bool,
    pub prompt_id: u64,
}

/// Construct a future-energy-homogeneous group and score it with `model`.
pub fn homogeneous_group<R: RngCore + ?Sized>(
    spec: &HomogeneousGroupSpec,
    model: &RewardModel,
    rng: &mut R,
) -> GroupBatch {
    assert!(spec.members >= 2);
    assert!(spec.prefix_len >= 1 && spec.suffix_len >= 1);
    let v = spec.vocab.size();

    let suffix: Vec<(Vec<f64>, TokenId)> = (0..spec.suffix_len)
        .map(|j| {
            let last = j + 1 == spec.suffix_len;
            let token = if last {
                EOS
            } else {
                random_non_eos(v, rng)
            };
            let dist = if spec.deterministic_suffix {
                one_hot(v, token)
            } else {
                random_simplex(v, rng)
            };
            (dist, token)
        })
        .collect();

    let members = (0..spec.members)
        .map(|_| {
            let mut tokens = Vec::new();
            let mut dists = Vec::new();
            for _ in 0..spec.prefix_len {
                let token = random_non_eos(v, rng);
                let dist = if spec.deterministic_prefix {
                    one_hot(v, token)
                } else {
                    random_simplex(v, rng)
                };
                tokens.push(token);
                dists.push(dist);
            }
            for (dist, token) in &suffix {
                tokens.push(*token);
                dists.push(dist.clone());
            }
            let rewards = model.score(&tokens);
            Trajectory {
                prompt_id: spec.prompt_id,
                tokens,
                step_dists: dists,
                rewards,
                behavior_logprobs: None,
            }
        })
        .collect();
    GroupBatch::new(members).expect("members >= 2 by assertion")
}

fn random_non_eos<R: RngCore + ?Sized>(vocab: usize, rng: &mut R) -> TokenId {
    1 + (unit_f64(rng) * (vocab - 1) as f64).floor().min((vocab - 2) as f64) as TokenId
}

fn random_simplex<R: RngCore + ?Sized>(vocab: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..vocab).map(|_| -(1.0 - unit_f64(rng)).ln()).collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    w
}

fn one_hot(vocab: usize, token: TokenId) -> Vec<f64> {
    let mut d = vec![0.0; vocab];
    d[token as usize] = 1.0;
    d
}
