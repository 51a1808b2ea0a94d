//! Run configuration: a flat TOML document plus environment overrides.
//!
//! Every key is optional; omitted keys take the defaults below. Key names
//! follow the usual GRPO trainer vocabulary (`num_groups`, `grpo_epoch`,
//! `policy_clip_eps`, ...). Any key can be overridden through an environment
//! variable named `MARL_EVO_<KEY>` (upper case), whose value is parsed as a
//! TOML value and falls back to a plain string.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{GrpoConfig, Selection};
use crate::memory::MemoryConfig;
use crate::orchestrator::env::ENVIRONMENTS;
use crate::policy::{OptimizerKind, OptimizerState};

/// Prefix of environment-variable overrides.
pub const ENV_PREFIX: &str = "MARL_EVO_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}' expects {expected}")]
    Type { key: String, expected: &'static str },
    #[error("config key '{key}': {message}")]
    Invalid { key: String, message: String },
}

/// Which implementation drives an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentBackend {
    /// Trainable softmax policy.
    Builtin,
    /// Scripted reference behaviour (not trained).
    Oracle,
    /// External model server.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub adam_epsilon: f64,
    /// Group size `G` at every node.
    pub num_groups: usize,
    /// `K` of the variance-ranked selection.
    pub topk_groups: usize,
    pub kl_coef: f64,
    pub grpo_epoch: usize,
    pub policy_clip_eps: f64,
    pub temperature: f64,
    pub num_train_epochs: usize,
    pub per_device_train_batch_size: usize,
    /// Outer repetitions of the full epoch schedule.
    pub iterations: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub environment: String,
    /// Dataset files; generated from the environment when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<String>,
    pub num_train_tasks: usize,
    pub num_eval_tasks: usize,
    /// Evaluate every this many training steps (0: only after each epoch).
    pub eval_every: usize,
    pub deletion_threshold: f64,
    pub memory_capacity: usize,
    pub recall_n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub std_floor: f64,
    pub selection: Selection,
    /// Include the efficiency term in the total reward.
    pub efficiency_reward: bool,
    pub eval_temperature: f64,
    pub optim: OptimizerKind,
    pub policy_dim: usize,
    pub master_policy: AgentBackend,
    pub subagent_policy: AgentBackend,
    /// `host:port` of the policy server, or `mock` for the in-process mock.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote_address: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            max_grad_norm: 1.0,
            adam_epsilon: 1e-5,
            num_groups: 5,
            topk_groups: 5,
            kl_coef: 0.0,
            grpo_epoch: 2,
            policy_clip_eps: 0.2,
            temperature: 1.2,
            num_train_epochs: 5,
            per_device_train_batch_size: 1,
            iterations: 2,
            max_steps: 8,
            seed: 0,
            environment: "routing".into(),
            train_dataset: None,
            eval_dataset: None,
            num_train_tasks: 100,
            num_eval_tasks: 100,
            eval_every: 0,
            deletion_threshold: 0.0,
            memory_capacity: 1024,
            recall_n: 3,
            alpha: 1.0,
            beta: 1.0,
            std_floor: 1e-8,
            selection: Selection::Topk,
            efficiency_reward: true,
            eval_temperature: 0.0,
            optim: OptimizerKind::Sgd,
            policy_dim: crate::policy::DEFAULT_POLICY_DIM,
            master_policy: AgentBackend::Builtin,
            subagent_policy: AgentBackend::Builtin,
            remote_address: None,
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Float,
    Int,
    Bool,
    Str,
}

impl Kind {
    fn expected(self) -> &'static str {
        match self {
            Kind::Float => "a number",
            Kind::Int => "a non-negative integer",
            Kind::Bool => "a boolean",
            Kind::Str => "a string",
        }
    }
}

const KEYS: &[(&str, Kind)] = &[
    ("learning_rate", Kind::Float),
    ("max_grad_norm", Kind::Float),
    ("adam_epsilon", Kind::Float),
    ("num_groups", Kind::Int),
    ("topk_groups", Kind::Int),
    ("kl_coef", Kind::Float),
    ("grpo_epoch", Kind::Int),
    ("policy_clip_eps", Kind::Float),
    ("temperature", Kind::Float),
    ("num_train_epochs", Kind::Int),
    ("per_device_train_batch_size", Kind::Int),
    ("iterations", Kind::Int),
    ("max_steps", Kind::Int),
    ("seed", Kind::Int),
    ("environment", Kind::Str),
    ("train_dataset", Kind::Str),
    ("eval_dataset", Kind::Str),
    ("num_train_tasks", Kind::Int),
    ("num_eval_tasks", Kind::Int),
    ("eval_every", Kind::Int),
    ("deletion_threshold", Kind::Float),
    ("memory_capacity", Kind::Int),
    ("recall_n", Kind::Int),
    ("alpha", Kind::Float),
    ("beta", Kind::Float),
    ("std_floor", Kind::Float),
    ("selection", Kind::Str),
    ("efficiency_reward", Kind::Bool),
    ("eval_temperature", Kind::Float),
    ("optim", Kind::Str),
    ("policy_dim", Kind::Int),
    ("master_policy", Kind::Str),
    ("subagent_policy", Kind::Str),
    ("remote_address", Kind::Str),
];

/// Checks key names and value types, widening integers where a float is
/// expected, so that errors name the offending key.
fn check_table(table: &mut toml::Table) -> Result<(), ConfigError> {
    for (key, value) in table.iter_mut() {
        let kind = KEYS
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, kind)| *kind)
            .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        let ok = match (kind, &*value) {
            (Kind::Float, toml::Value::Float(_)) => true,
            (Kind::Float, toml::Value::Integer(i)) => {
                *value = toml::Value::Float(*i as f64);
                true
            }
            (Kind::Int, toml::Value::Integer(i)) => *i >= 0,
            (Kind::Bool, toml::Value::Boolean(_)) => true,
            (Kind::Str, toml::Value::String(_)) => true,
            _ => false,
        };
        if !ok {
            return Err(ConfigError::Type { key: key.clone(), expected: kind.expected() });
        }
    }
    Ok(())
}

fn parse_override(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses a TOML document, applying `overrides` (key, raw value) on top.
    pub fn from_toml_with<I>(text: &str, overrides: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
        for (key, raw) in overrides {
            table.insert(key, parse_override(&raw));
        }
        check_table(&mut table)?;
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Syntax(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with(text, std::iter::empty())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: &str| Err(ConfigError::Invalid { key: key.into(), message: message.into() });
        if self.kl_coef != 0.0 {
            return invalid("kl_coef", "kl_coef must be 0 in this engine");
        }
        if !(self.policy_clip_eps > 0.0 && self.policy_clip_eps < 1.0) {
            return invalid("policy_clip_eps", "must lie in (0, 1)");
        }
        if self.num_groups < 2 {
            return invalid("num_groups", "must be at least 2");
        }
        if self.grpo_epoch == 0 {
            return invalid("grpo_epoch", "must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return invalid("temperature", "must be positive");
        }
        if !(self.eval_temperature >= 0.0) {
            return invalid("eval_temperature", "must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate", "must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return invalid("max_grad_norm", "must be positive");
        }
        if !(self.adam_epsilon > 0.0) {
            return invalid("adam_epsilon", "must be positive");
        }
        if !(self.std_floor > 0.0) {
            return invalid("std_floor", "must be positive");
        }
        if self.per_device_train_batch_size != 1 {
            return invalid("per_device_train_batch_size", "only one task per step is supported");
        }
        if self.max_steps == 0 {
            return invalid("max_steps", "must be at least 1");
        }
        if self.policy_dim == 0 {
            return invalid("policy_dim", "must be positive");
        }
        if !ENVIRONMENTS.contains(&self.environment.as_str()) {
            return invalid("environment", &format!("unknown environment, expected one of {ENVIRONMENTS:?}"));
        }
        let uses_remote = self.master_policy == AgentBackend::Remote || self.subagent_policy == AgentBackend::Remote;
        if uses_remote && self.remote_address.is_none() {
            return invalid("remote_address", "required when an agent uses the remote backend");
        }
        self.memory().validate().map_err(|e| ConfigError::Invalid { key: "memory_capacity".into(), message: e.to_string() })?;
        Ok(())
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            clip_eps: self.policy_clip_eps,
            topk: self.topk_groups,
            selection: self.selection,
            grpo_epochs: self.grpo_epoch,
            kl_coef: self.kl_coef,
            learning_rate: self.learning_rate,
            max_grad_norm: self.max_grad_norm,
            std_floor: self.std_floor,
            temperature: self.temperature,
        }
    }

    pub fn memory(&self) -> MemoryConfig {
        MemoryConfig {
            deletion_threshold: self.deletion_threshold,
            capacity: self.memory_capacity,
            recall_n: self.recall_n,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn optimizer(&self) -> OptimizerState {
        match self.optim {
            OptimizerKind::Sgd => OptimizerState::sgd(),
            OptimizerKind::Adam => OptimizerState::adam(self.adam_epsilon),
        }
    }
}

/// `MARL_EVO_*` variables of the current process as (key, value) pairs.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|key| (key.to_ascii_lowercase(), v)))
        .collect();
    out.sort();
    out
}

/// Reads `path` and applies environment overrides.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    RunConfig::from_toml_with(&text, env_overrides())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.learning_rate, 1e-6);
        assert_eq!(cfg.policy_clip_eps, 0.2);
        assert_eq!((cfg.num_groups, cfg.topk_groups, cfg.grpo_epoch), (5, 5, 2));
        assert_eq!(cfg.temperature, 1.2);
        assert_eq!(cfg.kl_coef, 0.0);
    }

    #[test]
    fn single_override() {
        let cfg = RunConfig::from_toml("temperature = 0.7").unwrap();
        assert_eq!(cfg, RunConfig { temperature: 0.7, ..RunConfig::default() });
        let cfg = RunConfig::from_toml_with("", [("temperature".to_string(), "0.7".to_string())]).unwrap();
        assert_eq!(cfg.temperature, 0.7);
        let cfg = RunConfig::from_toml_with("", [("environment".to_string(), "cooperative".to_string())]).unwrap();
        assert_eq!(cfg.environment, "cooperative");
    }

    #[test]
    fn rejects_kl_and_unknown_keys() {
        let err = RunConfig::from_toml("kl_coef = 0.1").unwrap_err();
        assert!(err.to_string().contains("kl_coef must be 0 in this engine"), "{err}");
        let err = RunConfig::from_toml("tempreature = 1.0").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "tempreature"));
        let err = RunConfig::from_toml("num_groups = \"five\"").unwrap_err();
        assert!(err.to_string().contains("num_groups"), "{err}");
        assert!(err.to_string().contains("integer"), "{err}");
    }

    #[test]
    fn integer_accepted_for_float_key() {
        assert_eq!(RunConfig::from_toml("alpha = 2").unwrap().alpha, 2.0);
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig {
            learning_rate: 0.01,
            selection: Selection::All,
            train_dataset: Some("tasks.jsonl".into()),
            optim: OptimizerKind::Adam,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
