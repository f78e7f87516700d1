//! Desk-scale laboratory for token-level policy-gradient baselines.
//!
//! The crate builds tiny autoregressive softmax policies whose trajectory
//! spaces can be enumerated exhaustively, so every estimator property that
//! is usually argued asymptotically (unbiasedness, baseline optimality,
//! variance orderings) can be checked as an exact numerical identity.
//!
//! Module layout:
//!
//! - [`policy`] — tabular full-prefix and shared-weight linear softmax
//!   policies, score functions, logit deltas, and the logit-gradient proxy.
//! - [`rewards`] — trajectory container, rule-based reward models,
//!   reward-to-go and realized-energy profiles.
//! - [`oracle`] — exhaustive trajectory enumeration and exact expectations:
//!   true gradient, optimal baselines, the per-step objective, and exact
//!   estimator variance.
//! - [`baselines`] — the empirical group-statistics baseline zoo and
//!   per-token advantage computation.
//! - [`estimators`] — gradient estimators (non-causal, causal, truncated
//!   importance sampling) and batch variance diagnostics.
//!
//! All arithmetic is `f64`; softmax is stabilized by max-subtraction.
//! Sampling draws `u64` words from a caller-supplied [`rand_core::RngCore`]
//! and maps them to uniforms via `(x >> 11) * 2^-53`, so results are
//! reproducible for any fixed generator stream.

// Indexed loops over parallel per-step arrays are the house style in the
// numeric kernels, and `!(x > 0.0)` guards are NaN-aware on purpose.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod estimators;
pub mod oracle;
pub mod policy;
pub mod rewards;

pub use policy::{
    logit_cross_term, proxy_from_dist, proxy_from_parts, GradVec, LogitDelta, PolicyError,
    PolicyInit, PolicyParams, StepScore, TokenId, Vocab, EOS,
};
pub use rewards::{reward_to_go, realized_energy_profile, RewardError, RewardModel, Trajectory};
