//! Node-wise Monte Carlo sampling.
//!
//! Starting from one initial trajectory of length `k`, node `i` gets
//! `G_i - 1` alternative actions drawn from its agent's policy given the
//! frozen prefix; each alternative is rolled to termination without further
//! branching. Group `i` holds the original trajectory (member 0) plus its
//! alternatives, so the sampling cost is additive (`sum G_i` memberships)
//! instead of multiplicative (`prod G_i`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, AgentSpec, Observation, TaskInstance, Termination, Trajectory};
use crate::orchestrator::{run_branch, run_episode, EpisodeConfig, Environment, MemorySnapshot};
use crate::policy::SampledAction;
use crate::reward::RewardBreakdown;
use crate::text::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("initial trajectory has no nodes")]
    EmptyTrajectory,
    #[error("{got} group budgets for a trajectory of length {k}")]
    BudgetCount { got: usize, k: usize },
    #[error("group budget {g} at node {node} is below 2")]
    BudgetTooSmall { node: usize, g: usize },
}

/// The rollouts branched at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGroup {
    /// 1-based node index `i`.
    pub node_index: usize,
    pub agent: AgentId,
    /// Complete trajectories; member 0 is the initial trajectory.
    pub rollouts: Vec<Trajectory>,
    /// Sampling-time log-probability of each member's action at node `i`.
    pub old_logprobs: Vec<f64>,
    /// Total rewards, filled by [`crate::reward::score_group`].
    pub rewards: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
}

impl SamplingGroup {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// Observation shared by all members at the branching node.
    pub fn observation(&self) -> &Observation {
        &self.rollouts[0].nodes[self.node_index - 1].observation
    }

    /// Each member's action text at the branching node (`None` if the
    /// member failed before producing it).
    pub fn actions(&self) -> Vec<Option<&str>> {
        self.rollouts.iter().map(|r| r.nodes.get(self.node_index - 1).map(|n| n.action_text.as_str())).collect()
    }

    /// Population variance of the member rewards.
    pub fn reward_variance(&self) -> f64 {
        population_variance(&self.rewards)
    }
}

pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Counters for one sampling pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingCounts {
    /// Newly rolled-out branches: `sum (G_i - 1)`.
    pub fresh_rollouts: usize,
    /// Group memberships: `sum G_i`.
    pub memberships: usize,
    /// Distinct trajectories: `1 + sum (G_i - 1)`.
    pub distinct_rollouts: usize,
    /// Full-tree bound `prod G_i` (saturating).
    pub naive_bound: u128,
}

impl SamplingCounts {
    pub fn for_budgets(budgets: &[usize]) -> Self {
        let fresh = budgets.iter().map(|g| g - 1).sum::<usize>();
        Self {
            fresh_rollouts: fresh,
            memberships: budgets.iter().sum(),
            distinct_rollouts: 1 + fresh,
            naive_bound: budgets.iter().fold(1u128, |acc, &g| acc.saturating_mul(g as u128)),
        }
    }
}

/// One complete episode from the current policies.
pub fn initial_rollout(
    task: &TaskInstance,
    agents: &[AgentSpec],
    memory: &MemorySnapshot,
    env: &Environment,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Trajectory {
    run_episode(task, agents, memory, env, cfg, seed)
}

fn failed_branch(initial: &Trajectory, node: usize, message: String) -> Trajectory {
    Trajectory {
        task: initial.task.clone(),
        nodes: initial.nodes[..node - 1].to_vec(),
        final_answer: String::new(),
        terminated: Termination::Error,
        error: Some(message),
    }
}

/// Branches `budgets[i-1] - 1` alternatives at every node `i` of `initial`.
///
/// Alternatives use `cfg.temperature`; duplicates are kept so group sizes
/// are exact. Branch rollouts run in parallel and are assembled in
/// `(node, draw)` order.
pub fn node_wise_sample(
    initial: &Trajectory,
    budgets: &[usize],
    agents: &[AgentSpec],
    memory: &MemorySnapshot,
    env: &Environment,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<(Vec<SamplingGroup>, SamplingCounts), SamplerError> {
    let k = initial.len();
    if k == 0 {
        return Err(SamplerError::EmptyTrajectory);
    }
    if budgets.len() != k {
        return Err(SamplerError::BudgetCount { got: budgets.len(), k });
    }
    if let Some((i, &g)) = budgets.iter().enumerate().find(|(_, &g)| g < 2) {
        return Err(SamplerError::BudgetTooSmall { node: i + 1, g });
    }

    // draw the alternatives of every node first (cheap, sequential)
    let mut jobs: Vec<(usize, usize, Result<SampledAction, String>)> = Vec::new();
    for (idx, node) in initial.nodes.iter().enumerate() {
        let i = idx + 1;
        let n = budgets[idx] - 1;
        let policy = agents.iter().find(|a| a.id == node.agent).map(|a| &a.policy);
        let drawn = match policy {
            Some(p) => p.sample(&node.observation, n, cfg.temperature, derive_seed(seed, &[i as u64])).map_err(|e| e.to_string()),
            None => Err(format!("no agent named {}", node.agent)),
        };
        match drawn {
            Ok(actions) if actions.len() == n => {
                jobs.extend(actions.into_iter().enumerate().map(|(d, a)| (i, d + 1, Ok(a))));
            }
            Ok(actions) => {
                let msg = format!("policy returned {} of {n} alternatives", actions.len());
                jobs.extend((1..=n).map(|d| (i, d, Err(msg.clone()))));
            }
            Err(e) => jobs.extend((1..=n).map(|d| (i, d, Err(e.clone())))),
        }
    }

    let branches: Vec<(usize, f64, Trajectory)> = jobs
        .into_par_iter()
        .map(|(i, d, action)| match action {
            Ok(a) => {
                let logprob = a.logprob;
                let t = run_branch(initial, i, a, agents, memory, env, cfg, derive_seed(seed, &[i as u64, d as u64]));
                (i, logprob, t)
            }
            Err(e) => {
                env.record_episode();
                (i, f64::NAN, failed_branch(initial, i, e))
            }
        })
        .collect();

    let mut groups: Vec<SamplingGroup> = initial
        .nodes
        .iter()
        .map(|node| SamplingGroup {
            node_index: node.index,
            agent: node.agent.clone(),
            rollouts: vec![initial.clone()],
            old_logprobs: vec![node.action_logprob],
            rewards: Vec::new(),
            breakdowns: Vec::new(),
        })
        .collect();
    for (i, logprob, t) in branches {
        groups[i - 1].rollouts.push(t);
        groups[i - 1].old_logprobs.push(logprob);
    }
    Ok((groups, SamplingCounts::for_budgets(budgets)))
}
