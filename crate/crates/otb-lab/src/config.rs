//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::Path;

use otb_core::baselines::BaselineKind;
use otb_core::estimators::{EstimatorForm, EstimatorSpec};
use otb_core::{PolicyInit, PolicyParams, RewardModel, Vocab};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: PolicySection,
    pub reward: RewardModel,
    pub estimator: EstimatorSection,
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Test hook: deliberately corrupt a verification input to prove the
    /// checks can fail.
    #[serde(default)]
    pub fault: FaultHook,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    /// `tabular_prefix` or `linear_softmax`.
    pub kind: String,
    pub vocab_size: usize,
    pub t_max: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    pub init: PolicyInit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    /// `non_causal`, `causal`, or `causal_tis`.
    pub form: String,
    /// `none | grpo | rloo | opo | ogb | otb | otb_isolated | otb_tis |
    /// value_oracle`.
    pub baseline: String,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Group size N.
    pub group_size: usize,
    #[serde(default = "default_batch_groups")]
    pub batch_groups: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    /// Batches for the Monte-Carlo variance-of-mean convergence check.
    #[serde(default = "default_mc_batches")]
    pub mc_batches: usize,
    /// Batches per baseline kind in `compare`.
    #[serde(default = "default_compare_batches")]
    pub compare_batches: usize,
    /// Moving-window width for smoothed training curves; 0 plots raw values.
    #[serde(default)]
    pub smooth_window: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    /// `csv` or `csv+svg`.
    #[serde(default = "default_format")]
    pub format: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            format: default_format(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultHook {
    #[default]
    None,
    /// Flip the sign of the oracle token-baseline schedule before the
    /// stationarity checks run.
    WrongSignBaseline,
}

fn default_feature_dim() -> usize {
    8
}
fn default_clip() -> f64 {
    2.0
}
fn default_batch_groups() -> usize {
    2
}
fn default_mc_batches() -> usize {
    100_000
}
fn default_compare_batches() -> usize {
    1_000
}
fn default_out_dir() -> String {
    "out".to_string()
}
fn default_format() -> String {
    "csv+svg".to_string()
}

impl ExperimentConfig {
    /// The default desk instance: ternary vocabulary, horizon 5, terminal
    /// target-token reward, groups of 8, five seeds.
    pub fn default_desk() -> Self {
        Self {
            policy: PolicySection {
                kind: "tabular_prefix".to_string(),
                vocab_size: 3,
                t_max: 5,
                feature_dim: default_feature_dim(),
                init: PolicyInit::Gaussian {
                    sigma: 0.7,
                    seed: 7,
                },
            },
            reward: RewardModel::TerminalTarget {
                target: 2,
                reward: 1.0,
            },
            estimator: EstimatorSection {
                form: "causal".to_string(),
                baseline: "otb".to_string(),
                clip: default_clip(),
            },
            run: RunSection {
                group_size: 8,
                batch_groups: default_batch_groups(),
                steps: 200,
                learning_rate: 1.0,
                seeds: vec![1, 2, 3, 4, 5],
                mc_batches: default_mc_batches(),
                compare_batches: default_compare_batches(),
                smooth_window: 0,
            },
            output: OutputSection::default(),
            fault: FaultHook::None,
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.policy.vocab_size < 2 {
            return Err(HarnessError::Config("vocab_size must be >= 2".into()));
        }
        if self.policy.t_max == 0 {
            return Err(HarnessError::Config("t_max must be >= 1".into()));
        }
        if !matches!(self.policy.kind.as_str(), "tabular_prefix" | "linear_softmax") {
            return Err(HarnessError::Config(format!(
                "unknown policy kind `{}`",
                self.policy.kind
            )));
        }
        self.baseline_kind()?;
        self.estimator_form()?;
        if !(self.estimator.clip > 0.0) {
            return Err(HarnessError::Config("clip must be > 0".into()));
        }
        if self.run.group_size < 2 {
            return Err(HarnessError::Config("group_size must be >= 2".into()));
        }
        if self.run.batch_groups == 0 {
            return Err(HarnessError::Config("batch_groups must be >= 1".into()));
        }
        if !(self.run.learning_rate > 0.0) || !self.run.learning_rate.is_finite() {
            return Err(HarnessError::Config(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if self.run.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must be nonempty".into()));
        }
        if !matches!(self.output.format.as_str(), "csv" | "csv+svg") {
            return Err(HarnessError::Config(format!(
                "unknown format `{}`",
                self.output.format
            )));
        }
        self.reward
            .validate(self.policy.vocab_size)
            .map_err(|e| HarnessError::Config(format!("reward: {e}")))?;
        let form = self.estimator_form()?;
        let kind = self.baseline_kind()?;
        if form == EstimatorForm::NonCausal && !kind.is_trajectory_level() && kind != BaselineKind::None
        {
            return Err(HarnessError::Config(format!(
                "non_causal form needs a trajectory-level baseline, got `{}`",
                kind.name()
            )));
        }
        Ok(())
    }

    pub fn baseline_kind(&self) -> Result<BaselineKind, HarnessError> {
        BaselineKind::parse(&self.estimator.baseline).ok_or_else(|| {
            HarnessError::Config(format!(
                "unknown baseline kind `{}`",
                self.estimator.baseline
            ))
        })
    }

    pub fn estimator_form(&self) -> Result<EstimatorForm, HarnessError> {
        EstimatorForm::parse(&self.estimator.form).ok_or_else(|| {
            HarnessError::Config(format!("unknown estimator form `{}`", self.estimator.form))
        })
    }

    pub fn estimator_spec(&self) -> Result<EstimatorSpec, HarnessError> {
        Ok(EstimatorSpec {
            form: self.estimator_form()?,
            baseline: self.baseline_kind()?,
            clip: self.estimator.clip,
        })
    }

    /// Instantiate the policy for one run seed. The run seed is folded into
    /// the Gaussian init seed so that "per seed" means "per random
    /// instance"; zero init ignores it.
    pub fn build_policy(&self, run_seed: u64) -> Result<PolicyParams, HarnessError> {
        let vocab = Vocab::new(self.policy.vocab_size)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let init = match &self.policy.init {
            PolicyInit::Zeros => PolicyInit::Zeros,
            PolicyInit::Gaussian { sigma, seed } => PolicyInit::Gaussian {
                sigma: *sigma,
                seed: mix_seeds(*seed, run_seed),
            },
        };
        let params = match self.policy.kind.as_str() {
            "tabular_prefix" => PolicyParams::tabular(vocab, self.policy.t_max, &init),
            "linear_softmax" => {
                PolicyParams::linear(vocab, self.policy.t_max, self.policy.feature_dim, &init)
            }
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown policy kind `{other}`"
                )))
            }
        };
        params.map_err(|e| HarnessError::Config(e.to_string()))
    }
}

/// SplitMix64 over the pair, the seed-derivation rule used everywhere in
/// the harness.
pub fn mix_seeds(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}
