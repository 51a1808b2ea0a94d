//! Checkpoint directories: built-in policy parameters, memory stores and
//! the run cursor.
//!
//! Layout of one checkpoint:
//! ```text
//! <dir>/cursor.json          {"iteration", "epoch", "step", "clock"}
//! <dir>/policies/<agent>.json  parameters, optimizer state and version
//! <dir>/memory/<agent>.jsonl   one memory entry per line
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{MemoryError, MemoryStore};
use crate::model::{AgentId, AgentSpec};
use crate::policy::{Backend, SoftmaxPolicy};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {message}")]
    Io { path: String, message: String },
    #[error("checkpoint memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("checkpoint has parameters for unknown agent '{0}'")]
    UnknownAgent(String),
}

/// Position of a run when the checkpoint was taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCursor {
    /// Iteration and epoch that just completed (0-based).
    pub iteration: usize,
    pub epoch: usize,
    /// Training steps taken so far.
    pub step: u64,
    /// Memory step counter.
    pub clock: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyFile {
    version: u64,
    policy: SoftmaxPolicy,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |e| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let text = serde_json::to_string(value).map_err(|e| io_err(path)(e.into()))?;
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| io_err(path)(e.into()))
}

/// Writes a checkpoint into `dir` (created if needed).
pub fn save_checkpoint(
    dir: &Path,
    cursor: &RunCursor,
    agents: &[AgentSpec],
    memory: &BTreeMap<AgentId, MemoryStore>,
) -> Result<(), CheckpointError> {
    let policies = dir.join("policies");
    let stores = dir.join("memory");
    for d in [dir, &policies, &stores] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    write_json(&dir.join("cursor.json"), cursor)?;
    for agent in agents {
        if let Backend::Softmax(p) = &agent.policy.backend {
            let file = PolicyFile { version: agent.policy.version, policy: p.clone() };
            write_json(&policies.join(format!("{}.json", agent.id)), &file)?;
        }
    }
    for (agent, store) in memory {
        store.save(&stores.join(format!("{agent}.jsonl")))?;
    }
    Ok(())
}

/// Restores built-in parameters into `agents` and returns the stored
/// memories and cursor.
pub fn load_checkpoint(
    dir: &Path,
    agents: &mut [AgentSpec],
) -> Result<(RunCursor, BTreeMap<AgentId, MemoryStore>), CheckpointError> {
    let cursor: RunCursor = read_json(&dir.join("cursor.json"))?;
    let policies = dir.join("policies");
    if policies.is_dir() {
        for path in sorted_files(&policies, "json")? {
            let id = stem(&path);
            let file: PolicyFile = read_json(&path)?;
            let agent = agents.iter_mut().find(|a| a.id == id).ok_or_else(|| CheckpointError::UnknownAgent(id.clone()))?;
            agent.policy.backend = Backend::Softmax(file.policy);
            agent.policy.version = file.version;
        }
    }
    let mut memory = BTreeMap::new();
    let stores = dir.join("memory");
    if stores.is_dir() {
        for path in sorted_files(&stores, "jsonl")? {
            memory.insert(stem(&path), MemoryStore::load(&path)?);
        }
    }
    Ok((cursor, memory))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CheckpointError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentRole;
    use crate::policy::{OptimizerState, PolicyHandle};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut agents = vec![AgentSpec {
            id: "master_agent".into(),
            role: AgentRole::Master,
            policy: PolicyHandle::softmax("master_agent", 8, OptimizerState::adam(1e-5)),
            tool_names: Default::default(),
        }];
        agents[0].policy.apply_update(&[0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.25], 0.1, 1.0).unwrap();
        let mut store = MemoryStore::new();
        store.insert("q", 3, &["math_agent".into()], "12", 1.5);
        let memory = BTreeMap::from([("master_agent".to_string(), store)]);
        let cursor = RunCursor { iteration: 1, epoch: 2, step: 30, clock: 30 };
        save_checkpoint(dir.path(), &cursor, &agents, &memory).unwrap();

        let mut fresh = vec![AgentSpec {
            policy: PolicyHandle::softmax("master_agent", 8, OptimizerState::adam(1e-5)),
            ..agents[0].clone()
        }];
        let (c, m) = load_checkpoint(dir.path(), &mut fresh).unwrap();
        assert_eq!(c, cursor);
        assert_eq!(m, memory);
        assert_eq!(fresh[0].policy.softmax_policy(), agents[0].policy.softmax_policy());
        assert_eq!(fresh[0].policy.version, 1);
    }
}
