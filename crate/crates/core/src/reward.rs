//! Accuracy, format and efficiency rewards.
//!
//! The action reward of a rollout scored for node `i` is
//! `R = R_A + R_F - R_E(i, k)` with `R_E(j, k) = (k - j) / k`; memory
//! evolution uses `R_M = R_A + R_F`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{tool_call_name, Tag, TaskInstance, TaskKind, Termination, Trajectory};
use crate::sampler::SamplingGroup;
use crate::text::{numbers_in, parse_number, token_f1};

/// Minimum similarity for a free-text answer to count as correct.
pub const SIMILARITY_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
    pub efficiency: f64,
    pub total: f64,
    /// Reward without the efficiency term, consumed by memory evolution.
    pub memory: f64,
}

impl RewardBreakdown {
    pub fn new(accuracy: f64, format: f64, efficiency: f64) -> Self {
        Self { accuracy, format, efficiency, total: accuracy + format - efficiency, memory: accuracy + format }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("node index {j} outside 1..={k}")]
    NodeIndex { j: usize, k: usize },
}

/// Symmetric answer similarity (token-level F1 after normalization).
pub fn similarity(a: &str, b: &str) -> f64 {
    token_f1(a, b)
}

fn numeric_value(text: &str) -> Option<f64> {
    parse_number(text).or_else(|| numbers_in(text).last().copied())
}

/// Name of the function a function-call answer refers to.
pub fn predicted_function(answer: &str) -> String {
    tool_call_name(answer).unwrap_or_else(|| answer.trim().to_string())
}

/// Kind-specific binary correctness of a final answer.
pub fn answer_is_correct(kind: TaskKind, predicted: &str, truth: &str) -> bool {
    match kind {
        TaskKind::Math => match (numeric_value(predicted), numeric_value(truth)) {
            (Some(p), Some(t)) => p == t,
            _ => false,
        },
        TaskKind::FunctionCall => predicted_function(predicted) == truth.trim(),
        TaskKind::Qa | TaskKind::Cooperative => similarity(predicted, truth) >= SIMILARITY_THRESHOLD,
    }
}

pub fn accuracy_reward(traj: &Trajectory, task: &TaskInstance) -> f64 {
    if traj.terminated != Termination::Answered {
        return 0.0;
    }
    if answer_is_correct(task.kind, &traj.final_answer, &task.answer) {
        1.0
    } else {
        0.0
    }
}

/// Rubric for one action: 1 for well-formed output with reasoning and an
/// action or answer, 0.5 for well-formed output lacking one of them, 0 for
/// malformed output.
pub fn node_format_score(action: &crate::model::StructuredOutput) -> f64 {
    if !action.well_formed {
        return 0.0;
    }
    let acts = action.has(Tag::ToolCall) || action.has(Tag::Answer);
    if action.has(Tag::Think) && acts {
        1.0
    } else {
        0.5
    }
}

/// Mean per-node format score; 0 for an empty trajectory.
pub fn format_reward(traj: &Trajectory) -> f64 {
    if traj.nodes.is_empty() {
        return 0.0;
    }
    traj.nodes.iter().map(|n| node_format_score(&n.action)).sum::<f64>() / traj.nodes.len() as f64
}

/// `(k - j) / k`.
pub fn efficiency_reward(j: usize, k: usize) -> Result<f64, RewardError> {
    if j < 1 || j > k {
        return Err(RewardError::NodeIndex { j, k });
    }
    Ok((k - j) as f64 / k as f64)
}

/// Scores one rollout on behalf of the group branched at `node_index`.
pub fn score_rollout(traj: &Trajectory, node_index: usize, with_efficiency: bool) -> RewardBreakdown {
    let accuracy = accuracy_reward(traj, &traj.task);
    let format = format_reward(traj);
    let efficiency = if with_efficiency {
        // every member shares nodes 1..=node_index, so k >= node_index
        efficiency_reward(node_index, traj.len().max(node_index)).unwrap_or(0.0)
    } else {
        0.0
    };
    RewardBreakdown::new(accuracy, format, efficiency)
}

/// Returns a copy of `group` with per-member rewards filled in.
pub fn score_group(group: &SamplingGroup, with_efficiency: bool) -> SamplingGroup {
    let mut scored = group.clone();
    scored.breakdowns = group.rollouts.iter().map(|r| score_rollout(r, group.node_index, with_efficiency)).collect();
    scored.rewards = scored.breakdowns.iter().map(|b| b.total).collect();
    scored
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_structured_output, Observation, TrajectoryNode};

    fn traj(kind: TaskKind, answer: &str, outputs: &[&str], final_answer: &str) -> Trajectory {
        let task = TaskInstance::new("t", kind, "q", answer);
        let nodes = outputs
            .iter()
            .enumerate()
            .map(|(i, o)| TrajectoryNode {
                index: i + 1,
                agent: "master_agent".into(),
                observation: Observation::bare("master_agent", "q"),
                action_text: o.to_string(),
                action: parse_structured_output(o),
                action_logprob: 0.0,
                timestamp: i as u64,
                response: String::new(),
                delegate: None,
            })
            .collect();
        let terminated = if final_answer.is_empty() { Termination::MaxSteps } else { Termination::Answered };
        Trajectory { task, nodes, final_answer: final_answer.into(), terminated, error: None }
    }

    #[test]
    fn accuracy_examples() {
        let t = traj(TaskKind::Math, "12000", &["<think>a</think>12000"], "12000");
        assert_eq!(accuracy_reward(&t, &t.task), 1.0);
        let t = traj(TaskKind::Math, "12000", &["<think>a</think>12000.0"], "12000.0 ");
        assert_eq!(accuracy_reward(&t, &t.task), 1.0);
        let t = traj(TaskKind::Math, "12000", &["x"], "the total is 12,000");
        assert_eq!(accuracy_reward(&t, &t.task), 1.0);
        let t = traj(TaskKind::FunctionCall, "search_order_code", &["x"], "search_order_code");
        assert_eq!(accuracy_reward(&t, &t.task), 1.0);
        let t = traj(TaskKind::FunctionCall, "search_order_code", &["x"], "{\"api_name\":\"search_order_code\"}");
        assert_eq!(accuracy_reward(&t, &t.task), 1.0);
        let t = traj(TaskKind::Qa, "open it in the app", &["x"], "open it in the app settings");
        assert_eq!(accuracy_reward(&t, &t.task), 1.0);
        let t = traj(TaskKind::Math, "12000", &["<tool_call>x</tool_call>"], "");
        assert_eq!(accuracy_reward(&t, &t.task), 0.0);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity("a b c", "a b c"), 1.0);
        assert_eq!(similarity("a b", "c d"), 0.0);
        assert!((similarity("a b c d", "a b") - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn format_examples() {
        let full = "<think>x</think><tool_call>{\"name\":\"t\"}</tool_call>";
        assert_eq!(format_reward(&traj(TaskKind::Math, "1", &[full, full], "")), 1.0);
        assert_eq!(format_reward(&traj(TaskKind::Math, "1", &[full, "<think>a<tool_call>x"], "")), 0.5);
        assert_eq!(format_reward(&traj(TaskKind::Math, "1", &["12000"], "12000")), 0.5);
        assert_eq!(format_reward(&traj(TaskKind::Math, "1", &["<think>only</think>"], "")), 0.5);
        assert_eq!(format_reward(&traj(TaskKind::Math, "1", &[""], "")), 0.0);
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(efficiency_reward(4, 4), Ok(0.0));
        assert_eq!(efficiency_reward(1, 4), Ok(0.75));
        assert_eq!(efficiency_reward(2, 5), Ok(0.6));
        assert!(efficiency_reward(0, 3).is_err());
        assert!(efficiency_reward(4, 3).is_err());
    }

    #[test]
    fn breakdown_examples() {
        let b = RewardBreakdown::new(1.0, 1.0, efficiency_reward(3, 3).unwrap());
        assert_eq!(b.total, 2.0);
        let b = RewardBreakdown::new(0.0, 1.0, efficiency_reward(1, 4).unwrap());
        assert_eq!(b.total, 0.25);
        assert_eq!(b.memory, 1.0);
        let four = "<think>x</think><tool_call>{\"name\":\"t\"}</tool_call>";
        let t = traj(TaskKind::Math, "1", &[four, four, four, four], "");
        let b = score_rollout(&t, 1, true);
        assert_eq!((b.accuracy, b.format, b.efficiency), (0.0, 1.0, 0.75));
        assert_eq!(score_rollout(&t, 1, false).efficiency, 0.0);
    }
}
