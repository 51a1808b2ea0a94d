//! Per-agent long-term memory driven by trajectory rewards.
//!
//! Each step the rewards of all sampled rollouts for one query define an
//! acceptance band `[L, U] = [mu - 1.96 sigma, mu + 1.96 sigma]`. A rollout
//! above the band is stored as a new memory and reinforces the memories it
//! recalled; a rollout below the band penalises them. Memories that were not
//! recalled only lose score with elapsed time, and anything that falls under
//! the deletion threshold (or out of capacity) is evicted.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::token_f1;

/// Multiplier of the 2.5% / 97.5% normal quantiles.
pub const BAND_Z: f64 = 1.96;

/// One stored experience. Field names follow the persisted record format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: u64,
    pub query: String,
    /// Step at which the entry was created or last reinforced.
    pub time: u64,
    pub plan: Vec<String>,
    pub answer: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBounds {
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Deletion threshold `D`.
    pub deletion_threshold: f64,
    pub capacity: usize,
    pub recall_n: usize,
    /// Weight of the time term.
    pub alpha: f64,
    /// Weight of the reward term.
    pub beta: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { deletion_threshold: 0.0, capacity: 1024, recall_n: 3, alpha: 1.0, beta: 1.0 }
    }
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory config: capacity {capacity} is smaller than recall_n {recall_n}")]
    Capacity { capacity: usize, recall_n: usize },
    #[error("memory io on {path}: {message}")]
    Io { path: String, message: String },
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.capacity < self.recall_n || self.capacity == 0 {
            return Err(MemoryError::Capacity { capacity: self.capacity, recall_n: self.recall_n });
        }
        Ok(())
    }
}

/// How a scored trajectory is compared against recalled memories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Compare final outputs.
    DirectAnswer,
    /// Compare planning chains.
    ToolCall,
}

/// Jaccard similarity over `(position, identifier)` pairs, so both content
/// and order of two plans must agree. Two empty plans are identical.
pub fn plan_similarity(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    let union = a.len() + b.len() - same;
    same as f64 / union as f64
}

/// Numerically stable softmax, summed left to right.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Population mean/std of memory rewards and the resulting band.
///
/// # Panics
/// Panics on an empty reward slice.
pub fn compute_bounds(rewards: &[f64]) -> RewardBounds {
    assert!(!rewards.is_empty(), "compute_bounds needs at least one reward");
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    RewardBounds { mean, std, lower: mean - BAND_Z * std, upper: mean + BAND_Z * std }
}

/// One scored rollout as seen by memory evolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryUpdate<'a> {
    pub query: &'a str,
    pub plan: &'a [String],
    pub output: &'a str,
    pub reward: f64,
    pub mode: SimilarityMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub inserted: Option<u64>,
    /// (entry id, score delta) for every recalled entry that changed.
    pub adjusted: Vec<(u64, f64)>,
    /// Recalled ids no longer present in the store.
    pub skipped: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub decayed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvictReport {
    pub below_threshold: Vec<u64>,
    pub over_capacity: Vec<u64>,
}

/// Memory of a single agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    entries: Vec<MemoryEntry>,
    next_id: u64,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<MemoryEntry>) -> Self {
        let next_id = entries.iter().map(|e| e.id + 1).max().unwrap_or(0);
        Self { entries, next_id }
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&MemoryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn min_score(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.score).reduce(f64::min)
    }

    /// Appends a new entry and returns its id.
    pub fn insert(&mut self, query: &str, time: u64, plan: &[String], answer: &str, score: f64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push(MemoryEntry {
            id,
            query: query.to_string(),
            time,
            plan: plan.to_vec(),
            answer: answer.to_string(),
            score,
        });
        id
    }

    /// The `n` entries whose query is most similar to `query`; ties go to
    /// the higher score, then the newer timestamp, then the lower id.
    pub fn recall(&self, query: &str, n: usize) -> Vec<MemoryEntry> {
        if n == 0 {
            return Vec::new();
        }
        let mut ranked: Vec<(f64, &MemoryEntry)> =
            self.entries.iter().map(|e| (token_f1(query, &e.query), e)).collect();
        ranked.sort_by(|(sa, a), (sb, b)| {
            sb.total_cmp(sa)
                .then(b.score.total_cmp(&a.score))
                .then(b.time.cmp(&a.time))
                .then(a.id.cmp(&b.id))
        });
        ranked.into_iter().take(n).map(|(_, e)| e.clone()).collect()
    }

    /// Reward-supervised update for one scored rollout.
    ///
    /// `recalled` is the snapshot the rollout saw; similarities are taken
    /// against the snapshot, score/time changes go to the live entries.
    pub fn update(
        &mut self,
        rollout: &MemoryUpdate<'_>,
        recalled: &[MemoryEntry],
        t: u64,
        bounds: &RewardBounds,
        cfg: &MemoryConfig,
    ) -> UpdateReport {
        let mut report = UpdateReport::default();
        let r_m = rollout.reward;
        let above = r_m > bounds.upper;
        let below = r_m < bounds.lower;
        if above {
            report.inserted = Some(self.insert(rollout.query, t, rollout.plan, rollout.output, r_m));
        }
        if recalled.is_empty() {
            return report;
        }
        let sims: Vec<f64> = recalled
            .iter()
            .map(|m| match rollout.mode {
                SimilarityMode::DirectAnswer => token_f1(rollout.output, &m.answer),
                SimilarityMode::ToolCall => plan_similarity(rollout.plan, &m.plan),
            })
            .collect();
        let weights = softmax(&sims);
        for (m, s) in recalled.iter().zip(&weights) {
            let Some(entry) = self.entries.iter_mut().find(|e| e.id == m.id) else {
                report.skipped.push(m.id);
                continue;
            };
            let (dt, ds) = if above {
                entry.time = t;
                (-(t.abs_diff(entry.time) as f64), s * (r_m - bounds.upper).abs())
            } else if below {
                (-(t.abs_diff(entry.time) as f64), -s * (r_m - bounds.lower).abs())
            } else {
                continue;
            };
            let before = entry.score;
            entry.score = entry.score + cfg.alpha * dt + cfg.beta * ds;
            report.adjusted.push((entry.id, entry.score - before));
        }
        report
    }

    /// Time decay for every entry not recalled this step.
    pub fn decay_others(&mut self, recalled: &BTreeSet<u64>, t: u64, alpha: f64) -> DecayReport {
        let mut report = DecayReport::default();
        if alpha == 0.0 {
            return report;
        }
        for e in self.entries.iter_mut().filter(|e| !recalled.contains(&e.id)) {
            let dt = -(t.abs_diff(e.time) as f64);
            if dt != 0.0 {
                e.score += alpha * dt;
                report.decayed += 1;
            }
        }
        report
    }

    /// Drops entries under `threshold`, then the lowest-ranked entries
    /// (lowest score, oldest first on ties) until `capacity` holds.
    pub fn evict(&mut self, threshold: f64, capacity: usize) -> EvictReport {
        let mut report = EvictReport::default();
        self.entries.retain(|e| {
            let keep = e.score >= threshold;
            if !keep {
                report.below_threshold.push(e.id);
            }
            keep
        });
        if self.entries.len() > capacity {
            let mut order: Vec<usize> = (0..self.entries.len()).collect();
            order.sort_by(|&a, &b| {
                let (ea, eb) = (&self.entries[a], &self.entries[b]);
                ea.score.total_cmp(&eb.score).then(ea.time.cmp(&eb.time)).then(ea.id.cmp(&eb.id))
            });
            let excess = self.entries.len() - capacity;
            let doomed: BTreeSet<u64> = order[..excess].iter().map(|&i| self.entries[i].id).collect();
            report.over_capacity = doomed.iter().copied().collect();
            self.entries.retain(|e| !doomed.contains(&e.id));
        }
        report
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let io = |e: std::io::Error| MemoryError::Io { path: path.display().to_string(), message: e.to_string() };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(|e| io(e.into()))?;
            out.write_all(b"\n").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let err = |message: String| MemoryError::Io { path: path.display().to_string(), message };
        let file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry =
                serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }
}
