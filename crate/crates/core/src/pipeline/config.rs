//! Pipeline configuration file (TOML).
//!
//! Every table rejects unknown keys. Omitted optional keys take the defaults
//! listed on [`PipelineConfig`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hlm::{build_hlm, Hlm, HlmError, Subtask, SubtaskId, TaskSpec};
use crate::policy::{LearnerSpec, RewardWeights, TrainBudget};
use crate::sim::{EnvironmentMap, FidelityConfig, SimError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid subtask set: {0}")]
    Hlm(#[from] HlmError),
    #[error("invalid simulator settings: {0}")]
    Sim(#[from] SimError),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

/// A subtask plus an optional learner override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskConfig {
    pub id: SubtaskId,
    pub entry: crate::geometry::PoseRegion,
    pub exit: crate::geometry::PoseRegion,
    pub timeout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner: Option<LearnerSpec>,
}

impl SubtaskConfig {
    pub fn subtask(&self) -> Subtask {
        Subtask {
            id: self.id.clone(),
            entry: self.entry,
            exit: self.exit,
            timeout: self.timeout,
        }
    }
}

/// Defaults: `n_verify = 100`, `n_composition_runs = 200`, `alpha = 0.05`,
/// `gate_on_lower_bound = false`, `max_outer_iterations = 5`,
/// `export_rollouts = 3`, `seed = 0`, `output_dir = "out"`, tile-coded
/// learner, `budget.max_steps = 200000`, `retrain_budget.max_steps = 100000`,
/// and the built-in low/high fidelity tiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: TaskSpec,
    pub subtasks: Vec<SubtaskConfig>,
    pub environment: EnvironmentMap,
    #[serde(default = "FidelityConfig::low_fidelity")]
    pub fidelity_low: FidelityConfig,
    #[serde(default = "FidelityConfig::high_fidelity")]
    pub fidelity_high: FidelityConfig,
    #[serde(default)]
    pub reward: RewardWeights,
    #[serde(default)]
    pub learner: LearnerSpec,
    #[serde(default = "default_budget")]
    pub budget: TrainBudget,
    #[serde(default = "default_retrain_budget")]
    pub retrain_budget: TrainBudget,
    #[serde(default = "default_n_verify")]
    pub n_verify: u32,
    #[serde(default = "default_n_composition_runs")]
    pub n_composition_runs: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub gate_on_lower_bound: bool,
    #[serde(default = "default_max_outer_iterations")]
    pub max_outer_iterations: u32,
    /// Composition rollouts recorded as trajectory CSVs after a successful run.
    #[serde(default = "default_export_rollouts")]
    pub export_rollouts: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_budget() -> TrainBudget {
    TrainBudget {
        max_steps: 200_000,
        eval_interval: 5_000,
        seed: 0,
    }
}

fn default_retrain_budget() -> TrainBudget {
    TrainBudget {
        max_steps: 100_000,
        eval_interval: 5_000,
        seed: 1,
    }
}

fn default_n_verify() -> u32 {
    crate::verify::DEFAULT_TRIALS
}

fn default_n_composition_runs() -> u64 {
    200
}

fn default_alpha() -> f64 {
    crate::verify::DEFAULT_ALPHA
}

fn default_max_outer_iterations() -> u32 {
    5
}

fn default_export_rollouts() -> u32 {
    3
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    /// Parses and validates a config document.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn subtask_list(&self) -> Vec<Subtask> {
        self.subtasks.iter().map(SubtaskConfig::subtask).collect()
    }

    pub fn subtask(&self, id: &SubtaskId) -> Option<&SubtaskConfig> {
        self.subtasks.iter().find(|s| s.id == *id)
    }

    pub fn learner_for(&self, id: &SubtaskId) -> &LearnerSpec {
        self.subtask(id)
            .and_then(|s| s.learner.as_ref())
            .unwrap_or(&self.learner)
    }

    /// Builds the HLM; fails if the subtasks are not composable or not
    /// compatible with the task.
    pub fn hlm(&self) -> Result<Hlm, HlmError> {
        build_hlm(&self.subtask_list(), &self.task)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hlm()?;
        self.environment.validate()?;
        self.fidelity_low.validate()?;
        self.fidelity_high.validate()?;
        if !self.reward.is_valid() {
            return Err(invalid(
                "reward",
                "success_reward must be positive, collision_reward negative, penalties non-negative",
            ));
        }
        check_learner("learner", &self.learner)?;
        for s in &self.subtasks {
            let id = s.id.as_str();
            let ok = !id.is_empty()
                && !id.starts_with('.')
                && id.chars().all(|ch| ch.is_ascii_alphanumeric() || "_-.".contains(ch));
            if !ok {
                return Err(invalid(
                    format!("subtasks.{id}.id"),
                    "ids may only use ASCII letters, digits, `_`, `-` and `.`",
                ));
            }
            if let Some(l) = &s.learner {
                check_learner(&format!("subtasks.{}.learner", s.id), l)?;
            }
        }
        if self.n_verify == 0 {
            return Err(invalid("n_verify", "must be at least 1"));
        }
        if self.n_composition_runs == 0 {
            return Err(invalid("n_composition_runs", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha", "must lie in (0, 1)"));
        }
        if self.max_outer_iterations == 0 {
            return Err(invalid("max_outer_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_learner(key: &str, l: &LearnerSpec) -> Result<(), ConfigError> {
    match l {
        LearnerSpec::TileQ(c) => c.validate().map_err(|r| invalid(key, r)),
        LearnerSpec::GoToPose(g) => {
            if [g.k_rho, g.k_alpha, g.k_beta].iter().all(|k| k.is_finite()) {
                g.limits.validate().map_err(ConfigError::from)
            } else {
                Err(invalid(key, "gains must be finite"))
            }
        }
    }
}
