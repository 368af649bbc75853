//! Single run configuration. Every knob has a default, so an empty file is a
//! valid config; `DEFAULT_CONFIG_TOML` spells all of them out.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credit::{CreditConfig, LossParams};
use crate::reward::NormalizerConfig;
use crate::scheduler::EpisodeConfig;
use crate::verify::QaScoring;
use crate::workers::RetryPolicy;

pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../orchestra.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Cost blend weight α.
    pub alpha: f64,
    /// Per-turn shaping bound η.
    pub eta: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: 0.1, eta: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub t_max: u32,
    pub context_budget: usize,
    pub call_timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub blind: bool,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self::from(&EpisodeConfig::default())
    }
}

impl From<&EpisodeConfig> for EpisodeSection {
    fn from(c: &EpisodeConfig) -> Self {
        Self {
            t_max: c.t_max,
            context_budget: c.context_budget,
            call_timeout_ms: c.call_timeout.as_millis() as u64,
            max_retries: c.retry.max_retries,
            backoff_ms: c.retry.backoff_ms,
            blind: c.blind,
        }
    }
}

impl EpisodeSection {
    pub fn to_episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            t_max: self.t_max,
            context_budget: self.context_budget,
            call_timeout: Duration::from_millis(self.call_timeout_ms),
            retry: RetryPolicy {
                max_retries: self.max_retries,
                backoff_ms: self.backoff_ms,
            },
            blind: self.blind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlSection {
    /// Rollouts per query.
    pub group_size: usize,
    #[serde(flatten)]
    pub credit: CreditConfig,
    #[serde(flatten)]
    pub loss: LossParams,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            group_size: 8,
            credit: CreditConfig::default(),
            loss: LossParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    pub attempts: u32,
    /// pass@1 as the mean over all attempts instead of the first attempt.
    pub pass1_mean_over_attempts: bool,
    /// Concurrent episodes; 0 means available parallelism.
    pub max_parallel: usize,
    pub qa_scoring: QaScoring,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            attempts: 2,
            pass1_mean_over_attempts: false,
            max_parallel: 0,
            qa_scoring: QaScoring::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    /// Tasks drawn per source when sampling the raw pool.
    pub quotas: BTreeMap<String, usize>,
}

/// Training-side values, recorded for provenance only. Nothing here is read
/// by the runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingRecord {
    pub sft_learning_rate: f64,
    pub sft_epochs: u32,
    pub sft_warmup_steps: u32,
    pub sft_effective_batch: u32,
    pub sequence_cutoff: u32,
    pub rl_learning_rate: f64,
    pub response_budget: u32,
}

impl Default for TrainingRecord {
    fn default() -> Self {
        Self {
            sft_learning_rate: 2e-5,
            sft_epochs: 2,
            sft_warmup_steps: 100,
            sft_effective_batch: 128,
            sequence_cutoff: 16384,
            rl_learning_rate: 1e-6,
            response_budget: 16384,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestraConfig {
    pub reward: RewardConfig,
    pub normalizer: NormalizerConfig,
    pub episode: EpisodeSection,
    pub rl: RlSection,
    pub harness: HarnessSection,
    pub curriculum: CurriculumSection,
    pub training: TrainingRecord,
}

impl OrchestraConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.reward.alpha) {
            return bad("reward.alpha must lie in [0, 1]");
        }
        if !(self.reward.eta > 0.0 && self.reward.eta <= 0.2) {
            return bad("reward.eta must lie in (0, 0.2]");
        }
        let n = &self.normalizer;
        if n.capacity == 0 || !(0.0..=100.0).contains(&n.lo_pct) || !(n.lo_pct < n.hi_pct && n.hi_pct <= 100.0) {
            return bad("normalizer needs capacity > 0 and 0 <= lo_pct < hi_pct <= 100");
        }
        if self.episode.t_max == 0 || self.episode.context_budget == 0 {
            return bad("episode.t_max and episode.context_budget must be positive");
        }
        if self.rl.group_size < 2 {
            return bad("rl.group_size must be at least 2");
        }
        if self.rl.loss.eps_clip <= 0.0 || self.rl.loss.beta < 0.0 {
            return bad("rl.eps_clip must be positive and rl.beta non-negative");
        }
        if self.harness.attempts == 0 {
            return bad("harness.attempts must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_file_equals_defaults() {
        let shipped = OrchestraConfig::from_toml(DEFAULT_CONFIG_TOML).unwrap();
        assert_eq!(shipped, OrchestraConfig::default());
        assert_eq!(OrchestraConfig::from_toml("").unwrap(), shipped);
    }

    #[test]
    fn headline_defaults() {
        let c = OrchestraConfig::default();
        assert_eq!(c.reward.alpha, 0.1);
        assert_eq!(c.rl.loss.beta, 1e-3);
        assert_eq!(c.rl.loss.eps_clip, 0.2);
        assert_eq!(c.rl.group_size, 8);
        assert_eq!(c.episode.t_max, 8);
        assert_eq!(c.normalizer.capacity, 1000);
        assert_eq!(c.episode.to_episode_config(), EpisodeConfig::default());
    }

    #[test]
    fn round_trip_and_rejects() {
        let c = OrchestraConfig::default();
        assert_eq!(OrchestraConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(OrchestraConfig::from_toml("[reward]\nalpha = 1.5\n").is_err());
        assert!(OrchestraConfig::from_toml("[reward]\nbogus = 1\n").is_err());
        assert!(OrchestraConfig::from_toml("[rl]\ngroup_size = 1\n").is_err());
        let partial = OrchestraConfig::from_toml("[rl]\ngamma = 0.9\n").unwrap();
        assert_eq!(partial.rl.credit.gamma, 0.9);
        assert_eq!(partial.rl.group_size, 8);
    }
}
