//! Softmax policies over a tiny vocabulary, their score functions, and the
//! logit-gradient proxy.
//!
//! Two policy families are provided:
//!
//! - [`PolicyParams::TabularPrefix`] keeps one logit row per generation
//!   context (the full token prefix). Score functions of different steps
//!   touch disjoint parameter rows, so their inner products vanish exactly:
//!   the regime where per-step baseline optima decouple.
//! - [`PolicyParams::LinearSoftmax`] shares one weight matrix across all
//!   contexts, with a deterministic unit-norm feature embedding of the
//!   prefix. Step gradients overlap, so cross-step correlations are live.
//!
//! For both families the squared score norm has the closed form
//! `1 - 2*pi(y) + ||pi||^2` (the logit delta norm), because the tabular rows
//! are logit rows and the linear features have unit norm.

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::rewards::Trajectory;

/// Token identifier. Valid ids are `0..vocab.size()`.
pub type TokenId = u32;

/// Reserved end-of-sequence token id. Generation halts when it is sampled.
pub const EOS: TokenId = 0;

/// Behavior log-probabilities are clamped at this floor before
/// exponentiation when forming importance ratios.
pub const LOG_PROB_FLOOR: f64 = -50.0;

/// Errors from policy construction and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("vocabulary must have at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("uninitialized context: prefix {0:?} has no logit row")]
    UninitializedContext(Vec<TokenId>),
    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("prefix length {len} reaches the horizon T_max = {t_max}")]
    PrefixTooLong { len: usize, t_max: usize },
    #[error("mismatched vocabulary sizes: {0} vs {1}")]
    VocabMismatch(usize, usize),
    #[error("non-finite logit encountered")]
    NonFiniteLogit,
    #[error("parameter vector length {got} does not match policy ({want})")]
    ParamLenMismatch { got: usize, want: usize },
    #[error("feature_dim must be >= 1")]
    BadFeatureDim,
    #[error("t_max must be >= 1")]
    BadHorizon,
}

/// Vocabulary descriptor. Token `0` is the reserved EOS id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self, PolicyError> {
        if size < 2 {
            return Err(PolicyError::VocabTooSmall(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// All token ids, EOS included.
    pub fn tokens(&self) -> impl Iterator<Item = TokenId> {
        0..self.size as TokenId
    }

    pub fn check_token(&self, token: TokenId) -> Result<(), PolicyError> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(PolicyError::TokenOutOfRange {
                token,
                vocab: self.size,
            })
        }
    }
}

/// Logit initialization scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyInit {
    Zeros,
    Gaussian { sigma: f64, seed: u64 },
}

/// Flat gradient / score vector over all policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVec {
    values: Vec<f64>,
}

impl GradVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &GradVec) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.values {
            *a *= s;
        }
    }

    pub fn dot(&self, other: &GradVec) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Max-norm of `self - other`.
    pub fn max_diff(&self, other: &GradVec) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One step's score function stored as the dense gradient restricted to its
/// nonzero span: `values` occupies parameter indices `offset..offset+len`.
///
/// Tabular scores touch a single logit row; linear-softmax scores span the
/// whole weight matrix (offset 0).
#[derive(Debug, Clone)]
pub struct StepScore {
    pub offset: usize,
    pub values: Vec<f64>,
}

impl StepScore {
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Inner product in the ambient parameter space. Disjoint spans give an
    /// exact zero.
    pub fn dot(&self, other: &StepScore) -> f64 {
        let lo = self.offset.max(other.offset);
        let hi = (self.offset + self.values.len()).min(other.offset + other.values.len());
        if lo >= hi {
            return 0.0;
        }
        (lo..hi)
            .map(|i| self.values[i - self.offset] * other.values[i - other.offset])
            .sum()
    }

    /// `acc[span] += scale * values`.
    pub fn add_scaled_into(&self, acc: &mut [f64], scale: f64) {
        for (i, v) in self.values.iter().enumerate() {
            acc[self.offset + i] += scale * v;
        }
    }

    pub fn to_grad_vec(&self, param_count: usize) -> GradVec {
        let mut g = GradVec::zeros(param_count);
        self.add_scaled_into(&mut g.values, 1.0);
        g
    }
}

/// Gradient of the sampled token's log-probability with respect to the
/// logits: `e_y - pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDelta {
    pub values: Vec<f64>,
}

impl LogitDelta {
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Closed-form squared logit-delta norm from a full distribution:
/// `1 - 2*dist[token] + sum_v dist[v]^2`.
pub fn proxy_from_dist(dist: &[f64], token: TokenId) -> f64 {
    let sq: f64 = dist.iter().map(|p| p * p).sum();
    proxy_from_parts(dist[token as usize], sq)
}

/// Same closed form from the sampled-token probability and the
/// sum-of-squares of the distribution, the two scalars a replay log keeps.
pub fn proxy_from_parts(sampled_prob: f64, dist_sq_norm: f64) -> f64 {
    1.0 - 2.0 * sampled_prob + dist_sq_norm
}

/// Inner product of two logit deltas in closed form:
/// `1[y_k = y_t] - dist_t[y_k] - dist_k[y_t] + <dist_k, dist_t>`.
pub fn logit_cross_term(
    dist_k: &[f64],
    token_k: TokenId,
    dist_t: &[f64],
    token_t: TokenId,
) -> Result<f64, PolicyError> {
    if dist_k.len() != dist_t.len() {
        return Err(PolicyError::VocabMismatch(dist_k.len(), dist_t.len()));
    }
    let indicator = if token_k == token_t { 1.0 } else { 0.0 };
    let dot: f64 = dist_k.iter().zip(dist_t).map(|(a, b)| a * b).sum();
    Ok(indicator - dist_t[token_k as usize] - dist_k[token_t as usize] + dot)
}

/// Importance ratio `pi_target / pi_behavior` computed in log space with the
/// behavior log-probability clamped at [`LOG_PROB_FLOOR`].
pub fn importance_ratio(ln_target: f64, ln_behavior: f64) -> f64 {
    (ln_target - ln_behavior.max(LOG_PROB_FLOOR)).exp()
}

/// Uniform draw in `[0, 1)` from 53 high bits of one `u64` word.
pub fn unit_f64<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller on two uniform words.
fn standard_normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// Stable 64-bit hashing for the feature embedding. Hand-rolled so the map is
// identical across platforms and releases.
const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a_tokens(tokens: &[TokenId]) -> u64 {
    let mut h = FNV_OFFSET;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    // Length marker keeps [1] and [1, 0-padding] distinct.
    h ^= tokens.len() as u64;
    h.wrapping_mul(FNV_PRIME)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Tabular policy: one logit row per generation context (full prefix).
///
/// Contexts are all EOS-free prefixes of length `< t_max`, pre-enumerated at
/// construction in lexicographic order; querying any other prefix is an
/// error.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    vocab: Vocab,
    t_max: usize,
    contexts: BTreeMap<Vec<TokenId>, usize>,
    logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(vocab: Vocab, t_max: usize, init: &PolicyInit) -> Result<Self, PolicyError> {
        if t_max == 0 {
            return Err(PolicyError::BadHorizon);
        }
        let mut contexts = BTreeMap::new();
        let mut stack: Vec<Vec<TokenId>> = vec![Vec::new()];
        while let Some(prefix) = stack.pop() {
            if prefix.len() + 1 < t_max {
                for token in 1..vocab.size() as TokenId {
                    let mut next = prefix.clone();
                    next.push(token);
                    stack.push(next);
                }
            }
            contexts.insert(prefix, 0);
        }
        for (row, (_, idx)) in contexts.iter_mut().enumerate() {
            *idx = row;
        }
        let logits = init_values(contexts.len() * vocab.size(), init)?;
        Ok(Self {
            vocab,
            t_max,
            contexts,
            logits,
        })
    }

    fn row(&self, prefix: &[TokenId]) -> Result<usize, PolicyError> {
        if prefix.len() >= self.t_max {
            return Err(PolicyError::PrefixTooLong {
                len: prefix.len(),
                t_max: self.t_max,
            });
        }
        self.contexts
            .get(prefix)
            .copied()
            .ok_or_else(|| PolicyError::UninitializedContext(prefix.to_vec()))
    }

    fn row_logits(&self, row: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.logits[row * v..(row + 1) * v]
    }

    pub fn context_count(&self) -> usize {
        self.contexts.len()
    }
}

/// Shared-weight policy: logits are `W h(prefix)` with a deterministic
/// hash-based feature embedding normalized to unit Euclidean norm, the exact
/// analogue of a constant-norm hidden state feeding an unembedding head.
#[derive(Debug, Clone)]
pub struct LinearSoftmaxPolicy {
    vocab: Vocab,
    t_max: usize,
    feature_dim: usize,
    /// Row-major `vocab.size() x feature_dim`.
    weights: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    pub fn new(
        vocab: Vocab,
        t_max: usize,
        feature_dim: usize,
        init: &PolicyInit,
    ) -> Result<Self, PolicyError> {
        if t_max == 0 {
            return Err(PolicyError::BadHorizon);
        }
        if feature_dim == 0 {
            return Err(PolicyError::BadFeatureDim);
        }
        let weights = init_values(vocab.size() * feature_dim, init)?;
        Ok(Self {
            vocab,
            t_max,
            feature_dim,
            weights,
        })
    }

    /// Deterministic unit-norm feature vector for a prefix.
    pub fn features(&self, prefix: &[TokenId]) -> Vec<f64> {
        let base = fnv1a_tokens(prefix);
        let mut v: Vec<f64> = (0..self.feature_dim)
            .map(|j| {
                let h = splitmix64(base ^ splitmix64(j as u64));
                (h >> 11) as f64 * (2.0 / (1u64 << 53) as f64) - 1.0
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            v[0] = 1.0;
        } else {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }

    fn logits_for(&self, features: &[f64]) -> Vec<f64> {
        (0..self.vocab.size())
            .map(|row| {
                let w = &self.weights[row * self.feature_dim..(row + 1) * self.feature_dim];
                w.iter().zip(features).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

fn init_values(len: usize, init: &PolicyInit) -> Result<Vec<f64>, PolicyError> {
    match init {
        PolicyInit::Zeros => Ok(vec![0.0; len]),
        PolicyInit::Gaussian { sigma, seed } => {
            if !sigma.is_finite() {
                return Err(PolicyError::NonFiniteLogit);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..len).map(|_| sigma * standard_normal(&mut rng)).collect())
        }
    }
}

/// A policy of either family. Immutable after construction; every operation
/// is a pure function of its inputs.
#[derive(Debug, Clone)]
pub enum PolicyParams {
    TabularPrefix(TabularPolicy),
    LinearSoftmax(LinearSoftmaxPolicy),
}

impl PolicyParams {
    pub fn tabular(vocab: Vocab, t_max: usize, init: &PolicyInit) -> Result<Self, PolicyError> {
        Ok(Self::TabularPrefix(TabularPolicy::new(vocab, t_max, init)?))
    }

    pub fn linear(
        vocab: Vocab,
        t_max: usize,
        feature_dim: usize,
        init: &PolicyInit,
    ) -> Result<Self, PolicyError> {
        Ok(Self::LinearSoftmax(LinearSoftmaxPolicy::new(
            vocab,
            t_max,
            feature_dim,
            init,
        )?))
    }

    pub fn vocab(&self) -> Vocab {
        match self {
            Self::TabularPrefix(p) => p.vocab,
            Self::LinearSoftmax(p) => p.vocab,
        }
    }

    pub fn t_max(&self) -> usize {
        match self {
            Self::TabularPrefix(p) => p.t_max,
            Self::LinearSoftmax(p) => p.t_max,
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        match self {
            Self::TabularPrefix(p) => p.logits.len(),
            Self::LinearSoftmax(p) => p.weights.len(),
        }
    }

    /// Flat copy of the parameter vector. Layout: tabular rows in context
    /// order, or the row-major weight matrix.
    pub fn params_vec(&self) -> Vec<f64> {
        match self {
            Self::TabularPrefix(p) => p.logits.clone(),
            Self::LinearSoftmax(p) => p.weights.clone(),
        }
    }

    /// New policy with parameters `theta + scale * delta`.
    pub fn updated(&self, delta: &[f64], scale: f64) -> Result<Self, PolicyError> {
        if delta.len() != self.param_count() {
            return Err(PolicyError::ParamLenMismatch {
                got: delta.len(),
                want: self.param_count(),
            });
        }
        let mut next = self.clone();
        let params = match &mut next {
            Self::TabularPrefix(p) => &mut p.logits,
            Self::LinearSoftmax(p) => &mut p.weights,
        };
        for (p, d) in params.iter_mut().zip(delta) {
            *p += scale * d;
        }
        Ok(next)
    }

    /// Next-token distribution for a prefix: numerically stable softmax of
    /// the context's logits. Entries are nonnegative and sum to 1.
    pub fn next_token_dist(&self, prefix: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        match self {
            Self::TabularPrefix(p) => Ok(softmax(p.row_logits(p.row(prefix)?))),
            Self::LinearSoftmax(p) => {
                if prefix.len() >= p.t_max {
                    return Err(PolicyError::PrefixTooLong {
                        len: prefix.len(),
                        t_max: p.t_max,
                    });
                }
                Ok(softmax(&p.logits_for(&p.features(prefix))))
            }
        }
    }

    pub fn log_prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64, PolicyError> {
        self.vocab().check_token(token)?;
        Ok(self.next_token_dist(prefix)?[token as usize].ln())
    }

    /// Logit-space gradient of `log pi(token | prefix)`: `e_token - pi`.
    pub fn logit_delta(&self, prefix: &[TokenId], token: TokenId) -> Result<LogitDelta, PolicyError> {
        self.vocab().check_token(token)?;
        let dist = self.next_token_dist(prefix)?;
        Ok(delta_from_dist(&dist, token))
    }

    /// Parameter-space score function as a dense flat vector.
    pub fn score_function(&self, prefix: &[TokenId], token: TokenId) -> Result<GradVec, PolicyError> {
        Ok(self.step_score(prefix, token)?.to_grad_vec(self.param_count()))
    }

    /// Score function in span-compressed form.
    pub fn step_score(&self, prefix: &[TokenId], token: TokenId) -> Result<StepScore, PolicyError> {
        let dist = self.next_token_dist(prefix)?;
        self.step_score_given_dist(prefix, &dist, token)
    }

    /// Score function when the context's distribution is already known
    /// (e.g. recorded on a trajectory). Skips the softmax recomputation.
    pub fn step_score_given_dist(
        &self,
        prefix: &[TokenId],
        dist: &[f64],
        token: TokenId,
    ) -> Result<StepScore, PolicyError> {
        self.vocab().check_token(token)?;
        let delta = delta_from_dist(dist, token);
        match self {
            Self::TabularPrefix(p) => {
                let row = p.row(prefix)?;
                Ok(StepScore {
                    offset: row * p.vocab.size(),
                    values: delta.values,
                })
            }
            Self::LinearSoftmax(p) => {
                let h = p.features(prefix);
                let mut values = Vec::with_capacity(p.vocab.size() * p.feature_dim);
                for d in &delta.values {
                    for hj in &h {
                        values.push(d * hj);
                    }
                }
                Ok(StepScore { offset: 0, values })
            }
        }
    }

    /// Squared score norm via the closed form `1 - 2*pi(token) + ||pi||^2`.
    ///
    /// Exact for both families here: tabular rows are logit rows, and the
    /// linear features have unit norm.
    pub fn proxy_norm(&self, prefix: &[TokenId], token: TokenId) -> Result<f64, PolicyError> {
        self.vocab().check_token(token)?;
        let dist = self.next_token_dist(prefix)?;
        Ok(proxy_from_dist(&dist, token))
    }

    /// Roll out one trajectory: stop at EOS or after `t_max` steps. Every
    /// step records the full next-token distribution. Tokens are drawn by
    /// inverse CDF from one uniform word per step.
    pub fn sample_trajectory<R: RngCore + ?Sized>(
        &self,
        prompt_id: u64,
        t_max: usize,
        rng: &mut R,
    ) -> Result<Trajectory, PolicyError> {
        self.rollout(self, prompt_id, t_max, rng, false)
    }

    /// Roll out with `behavior` choosing the tokens while `self` records the
    /// step distributions; `behavior_logprobs` carries the behavior policy's
    /// sampled-token log-probabilities.
    pub fn sample_trajectory_off_policy<R: RngCore + ?Sized>(
        &self,
        behavior: &PolicyParams,
        prompt_id: u64,
        t_max: usize,
        rng: &mut R,
    ) -> Result<Trajectory, PolicyError> {
        self.rollout(behavior, prompt_id, t_max, rng, true)
    }

    fn rollout<R: RngCore + ?Sized>(
        &self,
        behavior: &PolicyParams,
        prompt_id: u64,
        t_max: usize,
        rng: &mut R,
        record_behavior: bool,
    ) -> Result<Trajectory, PolicyError> {
        let mut tokens: Vec<TokenId> = Vec::new();
        let mut step_dists: Vec<Vec<f64>> = Vec::new();
        let mut behavior_logprobs: Vec<f64> = Vec::new();
        for _ in 0..t_max {
            let behavior_dist = behavior.next_token_dist(&tokens)?;
            let token = sample_index(&behavior_dist, unit_f64(rng));
            if std::ptr::eq(self, behavior) || !record_behavior {
                step_dists.push(behavior_dist.clone());
            } else {
                step_dists.push(self.next_token_dist(&tokens)?);
            }
            if record_behavior {
                behavior_logprobs.push(behavior_dist[token as usize].ln());
            }
            tokens.push(token);
            if token == EOS {
                break;
            }
        }
        let len = tokens.len();
        Ok(Trajectory {
            prompt_id,
            tokens,
            step_dists,
            rewards: vec![0.0; len],
            behavior_logprobs: if record_behavior {
                Some(behavior_logprobs)
            } else {
                None
            },
        })
    }
}

fn delta_from_dist(dist: &[f64], token: TokenId) -> LogitDelta {
    let mut values: Vec<f64> = dist.iter().map(|p| -p).collect();
    values[token as usize] += 1.0;
    LogitDelta { values }
}

/// Inverse-CDF sample from a probability vector given a uniform in `[0, 1)`.
fn sample_index(dist: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    (dist.len() - 1) as TokenId
}

impl fmt::Display for PolicyParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TabularPrefix(p) => write!(
                f,
                "tabular_prefix(vocab={}, t_max={}, contexts={})",
                p.vocab.size(),
                p.t_max,
                p.contexts.len()
            ),
            Self::LinearSoftmax(p) => write!(
                f,
                "linear_softmax(vocab={}, t_max={}, feature_dim={})",
                p.vocab.size(),
                p.t_max,
                p.feature_dim
            ),
        }
    }
}
