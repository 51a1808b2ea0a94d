//! Group-relative policy optimization without a KL term.
//!
//! Advantages are group rewards normalized by the population mean and
//! standard deviation. The per-group objective is the clipped surrogate
//! `(1/G) sum min(rho A, clip(rho, 1-eps, 1+eps) A)` with
//! `rho = exp(log pi_new - log pi_old)`. Only the groups with the largest
//! reward variance (top-K) are optimized, in ascending node order.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentSpec, Observation};
use crate::policy::{Backend, PolicyError, SoftmaxPolicy};
use crate::sampler::SamplingGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Only the K highest-variance groups.
    Topk,
    /// Every group (no marginal-benefit selection).
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub clip_eps: f64,
    pub topk: usize,
    pub selection: Selection,
    pub grpo_epochs: usize,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub std_floor: f64,
    /// Temperature at which log-probabilities are evaluated (the sampling one).
    pub temperature: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            topk: 5,
            selection: Selection::Topk,
            grpo_epochs: 2,
            kl_coef: 0.0,
            learning_rate: 1e-6,
            max_grad_norm: 1.0,
            std_floor: 1e-8,
            temperature: 1.2,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("a group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("length mismatch: {old} old log-probs, {new} new log-probs, {adv} advantages")]
    LengthMismatch { old: usize, new: usize, adv: usize },
    #[error("non-finite probability ratio for member {member}")]
    NonFiniteRatio { member: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("batch file {path}: {message}")]
    Batch { path: String, message: String },
}

impl GrpoConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GrpoError::Config(format!("policy_clip_eps must be in (0, 1), got {}", self.clip_eps)));
        }
        if self.kl_coef != 0.0 {
            return Err(GrpoError::Config("kl_coef must be 0 in this engine".into()));
        }
        if self.grpo_epochs == 0 {
            return Err(GrpoError::Config("grpo_epoch must be at least 1".into()));
        }
        if !(self.std_floor > 0.0) {
            return Err(GrpoError::Config("std_floor must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(GrpoError::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AdvantageSet {
    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|a| *a == 0.0)
    }
}

/// `(r - mean) / std` with population statistics; all zeros when
/// `std <= std_floor`.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<AdvantageSet, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let advantages =
        if std <= std_floor { vec![0.0; rewards.len()] } else { rewards.iter().map(|r| (r - mean) / std).collect() };
    Ok(AdvantageSet { advantages, mean, std })
}

/// Contribution of one member: `min(rho A, clip(rho) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// True when the clipped branch is strictly smaller, i.e. the member's
/// gradient is zero.
pub fn clip_binds(ratio: f64, advantage: f64, eps: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + eps) || (advantage < 0.0 && ratio < 1.0 - eps)
}

pub fn clipped_objective(old: &[f64], new: &[f64], advantages: &[f64], eps: f64) -> Result<f64, GrpoError> {
    if old.len() != new.len() || old.len() != advantages.len() {
        return Err(GrpoError::LengthMismatch { old: old.len(), new: new.len(), adv: advantages.len() });
    }
    if old.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (m, ((o, n), a)) in old.iter().zip(new).zip(advantages).enumerate() {
        let ratio = (n - o).exp();
        if !ratio.is_finite() {
            return Err(GrpoError::NonFiniteRatio { member: m });
        }
        total += clipped_term(ratio, *a, eps);
    }
    Ok(total / old.len() as f64)
}

/// One member of a group as seen by the built-in gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Member {
    /// Candidate index of the member's action, `None` if it has none.
    pub action: Option<usize>,
    pub old_logprob: f64,
    pub advantage: f64,
}

/// Objective value and exact gradient for a built-in policy on one group.
///
/// All members act on the same observation. Members without an action
/// contribute nothing to either value.
pub fn objective_gradient(
    policy: &SoftmaxPolicy,
    obs: &Observation,
    members: &[Member],
    eps: f64,
    temperature: f64,
) -> Result<(f64, Vec<f64>), GrpoError> {
    let mut grad = vec![0.0; policy.dim()];
    if members.is_empty() {
        return Ok((0.0, grad));
    }
    let dist = crate::policy::ActionDistribution::new(obs.candidates.clone(), policy.logits(obs), temperature)?;
    let log_probs = dist.log_probs();
    let probs = dist.probs();
    let g = members.len() as f64;
    let inv_t = 1.0 / temperature;
    let mut objective = 0.0;
    let mut weight_total = 0.0;
    let mut action_weights = vec![0.0; obs.candidates.len()];
    for (m, member) in members.iter().enumerate() {
        let Some(a) = member.action else { continue };
        if a >= log_probs.len() {
            return Err(GrpoError::Policy(PolicyError::OutsideSupport));
        }
        let ratio = (log_probs[a] - member.old_logprob).exp();
        if !ratio.is_finite() {
            return Err(GrpoError::NonFiniteRatio { member: m });
        }
        objective += clipped_term(ratio, member.advantage, eps);
        if member.advantage != 0.0 && !clip_binds(ratio, member.advantage, eps) {
            let w = member.advantage * ratio / g;
            action_weights[a] += w;
            weight_total += w;
        }
    }
    if weight_total != 0.0 || action_weights.iter().any(|w| *w != 0.0) {
        for (c, cand) in obs.candidates.iter().enumerate() {
            let coef = inv_t * (action_weights[c] - weight_total * probs[c]);
            if coef != 0.0 {
                for i in policy.candidate_indices(obs, cand) {
                    grad[i] += coef;
                }
            }
        }
    }
    Ok((objective / g, grad))
}

/// Indices of the `k` largest variances; ties go to the smaller index.
/// The result is sorted ascending.
pub fn select_topk(variances: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..variances.len()).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

pub fn select_topk_groups(groups: &[SamplingGroup], k: usize) -> Vec<usize> {
    let variances: Vec<f64> = groups.iter().map(|g| g.reward_variance()).collect();
    select_topk(&variances, k)
}

/// Training record emitted for remote agents, one per group member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub agent_id: String,
    pub context: String,
    pub output_text: String,
    pub advantage: f64,
    pub old_logprob: f64,
    pub clip_eps: f64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Built-in parameters updated in place.
    Updated,
    /// Training batch emitted for an external trainer.
    Emitted,
    /// Scripted agent; nothing to train.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupUpdate {
    pub node_index: usize,
    pub agent: String,
    pub variance: f64,
    pub mode: UpdateMode,
    pub advantages: Vec<f64>,
    pub objective_before: f64,
    pub objective_after: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub selected: Vec<usize>,
    pub groups: Vec<GroupUpdate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_file: Option<PathBuf>,
    #[serde(skip)]
    pub batch: Vec<BatchRecord>,
}

fn members_of(group: &SamplingGroup, obs: &Observation, advantages: &[f64]) -> Vec<Member> {
    group
        .actions()
        .into_iter()
        .zip(&group.old_logprobs)
        .zip(advantages)
        .map(|((action, old), adv)| Member {
            action: action.filter(|_| old.is_finite()).and_then(|text| obs.candidate_index(text)),
            old_logprob: *old,
            advantage: *adv,
        })
        .collect()
}

/// One optimization step over scored groups.
///
/// Groups are selected by reward variance (or all of them), then each
/// selected group gets `grpo_epochs` gradient steps for a built-in agent,
/// or a batch of training records for a remote agent. `batch_dir`, when
/// given, receives the step's batch file.
pub fn grpo_step(
    groups: &[SamplingGroup],
    agents: &mut [AgentSpec],
    cfg: &GrpoConfig,
    step: u64,
    batch_dir: Option<&Path>,
) -> Result<UpdateReport, GrpoError> {
    let mut report = UpdateReport::default();
    let selected = match cfg.selection {
        Selection::All => (0..groups.len()).collect(),
        Selection::Topk if cfg.topk == 0 => return Ok(report),
        Selection::Topk => select_topk_groups(groups, cfg.topk),
    };
    report.selected = selected.iter().map(|&g| groups[g].node_index).collect();
    for &gi in &selected {
        let group = &groups[gi];
        let adv = compute_advantages(&group.rewards, cfg.std_floor)?;
        let obs = group.observation();
        let Some(agent) = agents.iter_mut().find(|a| a.id == group.agent) else { continue };
        let mut update = GroupUpdate {
            node_index: group.node_index,
            agent: group.agent.clone(),
            variance: group.reward_variance(),
            mode: UpdateMode::Skipped,
            advantages: adv.advantages.clone(),
            objective_before: 0.0,
            objective_after: 0.0,
        };
        match &agent.policy.backend {
            Backend::Softmax(_) => {
                let members = members_of(group, obs, &adv.advantages);
                for epoch in 0..cfg.grpo_epochs {
                    let Backend::Softmax(policy) = &agent.policy.backend else { unreachable!() };
                    let (objective, grad) = objective_gradient(policy, obs, &members, cfg.clip_eps, cfg.temperature)?;
                    if epoch == 0 {
                        update.objective_before = objective;
                    }
                    agent.policy.apply_update(&grad, cfg.learning_rate, cfg.max_grad_norm)?;
                }
                let Backend::Softmax(policy) = &agent.policy.backend else { unreachable!() };
                update.objective_after = objective_gradient(policy, obs, &members, cfg.clip_eps, cfg.temperature)?.0;
                update.mode = UpdateMode::Updated;
            }
            Backend::Remote(_) => {
                let context = obs.context();
                for ((action, old), a) in group.actions().into_iter().zip(&group.old_logprobs).zip(&adv.advantages) {
                    let Some(text) = action else { continue };
                    report.batch.push(BatchRecord {
                        agent_id: group.agent.clone(),
                        context: context.clone(),
                        output_text: text.to_string(),
                        advantage: *a,
                        old_logprob: *old,
                        clip_eps: cfg.clip_eps,
                        step,
                    });
                }
                update.mode = UpdateMode::Emitted;
            }
            Backend::Scripted(_) => {}
        }
        report.groups.push(update);
    }
    if let (Some(dir), false) = (batch_dir, report.batch.is_empty()) {
        let path = dir.join(format!("batch-step-{step:06}.jsonl"));
        write_batch(&path, &report.batch)?;
        report.batch_file = Some(path);
    }
    Ok(report)
}

fn write_batch(path: &Path, records: &[BatchRecord]) -> Result<(), GrpoError> {
    let err = |e: std::io::Error| GrpoError::Batch { path: path.display().to_string(), message: e.to_string() };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(err)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(err)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| err(e.into()))?;
        out.write_all(b"\n").map_err(err)?;
    }
    out.flush().map_err(err)
}
