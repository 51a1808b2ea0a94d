//! Line-delimited metrics stream and the run summary derived from it.
//!
//! The stream is append-only. [`summarize`] only reads records, so
//! replaying a stream file reproduces the summary a run wrote.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::model::AgentId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("metrics stream has no run_end record")]
    Incomplete,
}

/// Memory evolution of one agent during one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryAudit {
    pub agent: AgentId,
    /// Distinct rollouts (indices into `StepMetrics::memory_rewards`) that
    /// involved this agent and were applied to its store.
    pub participated: Vec<usize>,
    /// Rollouts whose update inserted a new entry.
    pub inserted_from: Vec<usize>,
    pub size: usize,
    pub min_score: Option<f64>,
    pub evicted: usize,
}

/// One training step (one task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub iteration: usize,
    pub epoch: usize,
    pub task_id: String,
    pub task_kind: String,
    /// Reward variance of every group, by node.
    pub group_variances: Vec<f64>,
    /// 1-based node indices selected for optimization.
    pub selected: Vec<usize>,
    pub reward_mean: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    /// Accuracy reward of the initial rollout.
    pub accuracy: f64,
    /// Length `k` of the initial rollout.
    pub reasoning_rounds: usize,
    pub fresh_rollouts: usize,
    pub memberships: usize,
    /// Memory reward of every distinct rollout (original first).
    pub memory_rewards: Vec<f64>,
    pub bounds_lower: f64,
    pub bounds_upper: f64,
    pub memory: Vec<MemoryAudit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_file: Option<String>,
}

impl StepMetrics {
    pub fn memory_sizes(&self) -> BTreeMap<AgentId, usize> {
        self.memory.iter().map(|m| (m.agent.clone(), m.size)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_kind_accuracy: BTreeMap<String, f64>,
    pub accuracy: f64,
    pub avg_reasoning_rounds: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricsRecord {
    RunStart { config: RunConfig },
    Step(StepMetrics),
    Eval { step: u64, iteration: usize, epoch: usize, report: EvalReport },
    EpochEnd { iteration: usize, epoch: usize, step: u64, checkpoint: String },
    RunEnd { steps: u64, wall_time: f64 },
}

/// Run summary: training accuracy by task kind and mean reasoning rounds
/// over the last epoch of the last iteration, plus the final evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_kind_accuracy: BTreeMap<String, f64>,
    pub avg_reasoning_rounds: f64,
    pub steps: u64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_eval: Option<EvalReport>,
    pub config: RunConfig,
}

/// Rebuilds the summary from a complete record sequence.
pub fn summarize(records: &[MetricsRecord]) -> Result<RunSummary, MetricsError> {
    let mut config = None;
    let mut end = None;
    let mut final_eval = None;
    let mut last_epoch = None;
    for r in records {
        match r {
            MetricsRecord::RunStart { config: c } => config = Some(c.clone()),
            MetricsRecord::Step(s) => last_epoch = last_epoch.max(Some((s.iteration, s.epoch))),
            MetricsRecord::Eval { report, .. } => final_eval = Some(report.clone()),
            MetricsRecord::RunEnd { steps, wall_time } => end = Some((*steps, *wall_time)),
            MetricsRecord::EpochEnd { .. } => {}
        }
    }
    let (steps, wall_time) = end.ok_or(MetricsError::Incomplete)?;
    let config = config.ok_or(MetricsError::Incomplete)?;
    let mut kinds: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut rounds = 0usize;
    let mut n = 0usize;
    for r in records {
        if let MetricsRecord::Step(s) = r {
            if Some((s.iteration, s.epoch)) == last_epoch {
                let e = kinds.entry(s.task_kind.clone()).or_default();
                e.0 += s.accuracy;
                e.1 += 1;
                rounds += s.reasoning_rounds;
                n += 1;
            }
        }
    }
    Ok(RunSummary {
        per_kind_accuracy: kinds.into_iter().map(|(k, (sum, c))| (k, sum / c as f64)).collect(),
        avg_reasoning_rounds: if n == 0 { 0.0 } else { rounds as f64 / n as f64 },
        steps,
        wall_time,
        final_eval,
        config,
    })
}

/// Appends records to a stream file, flushing after each one.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), MetricsError> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| MetricsError::Io(e.into()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// Summary of a stream file.
pub fn replay_metrics(path: &Path) -> Result<RunSummary, MetricsError> {
    summarize(&read_metrics(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(step: u64, iteration: usize, epoch: usize, kind: &str, accuracy: f64, k: usize) -> MetricsRecord {
        MetricsRecord::Step(StepMetrics {
            step,
            iteration,
            epoch,
            task_id: format!("t{step}"),
            task_kind: kind.into(),
            group_variances: vec![0.0; k],
            selected: vec![],
            reward_mean: 0.0,
            reward_min: 0.0,
            reward_max: 0.0,
            accuracy,
            reasoning_rounds: k,
            fresh_rollouts: 0,
            memberships: 0,
            memory_rewards: vec![],
            bounds_lower: 0.0,
            bounds_upper: 0.0,
            memory: vec![],
            batch_file: None,
        })
    }

    #[test]
    fn summary_uses_last_epoch() {
        let records = vec![
            MetricsRecord::RunStart { config: RunConfig::default() },
            step(1, 0, 0, "math", 0.0, 4),
            step(2, 0, 1, "math", 1.0, 2),
            step(3, 0, 1, "qa", 0.0, 3),
            step(4, 0, 1, "math", 0.0, 2),
            MetricsRecord::RunEnd { steps: 4, wall_time: 1.5 },
        ];
        let s = summarize(&records).unwrap();
        assert_eq!(s.per_kind_accuracy["math"], 0.5);
        assert_eq!(s.per_kind_accuracy["qa"], 0.0);
        assert!((s.avg_reasoning_rounds - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!((s.steps, s.wall_time), (4, 1.5));
        assert!(matches!(summarize(&records[..5]), Err(MetricsError::Incomplete)));
    }

    #[test]
    fn stream_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let records = vec![
            MetricsRecord::RunStart { config: RunConfig::default() },
            step(1, 0, 0, "math", 1.0, 2),
            MetricsRecord::RunEnd { steps: 1, wall_time: 0.25 },
        ];
        let mut w = MetricsWriter::create(&path).unwrap();
        for r in &records {
            w.write(r).unwrap();
        }
        drop(w);
        assert_eq!(read_metrics(&path).unwrap(), records);
        assert_eq!(replay_metrics(&path).unwrap(), summarize(&records).unwrap());
    }
}
