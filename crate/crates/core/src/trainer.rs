//! The outer training loop.
//!
//! One step per task: an initial rollout, node-wise branching, scoring,
//! memory evolution for every participating agent, then a variance-selected
//! policy update. Evaluation runs greedy episodes and never writes to
//! policies or memories.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{save_checkpoint, CheckpointError, RunCursor};
use crate::config::{AgentBackend, ConfigError, RunConfig};
use crate::grpo::{grpo_step, GrpoError, UpdateReport};
use crate::memory::{compute_bounds, MemoryStore, MemoryUpdate, SimilarityMode};
use crate::metrics::{summarize, EvalReport, MemoryAudit, MetricsError, MetricsRecord, MetricsWriter, RunSummary, StepMetrics};
use crate::model::{load_dataset, AgentId, AgentRole, AgentSpec, DatasetError, TaskInstance, Termination, Trajectory};
use crate::orchestrator::{run_episode, EnvError, Environment, EpisodeConfig, MemorySnapshot};
use crate::policy::{
    MockBehavior, MockPolicyServer, PolicyHandle, RemotePolicy, ScriptedRule, TcpTransport, Transport,
};
use crate::reward::{accuracy_reward, score_group};
use crate::sampler::{initial_rollout, node_wise_sample, SamplerError, SamplingGroup};
use crate::text::derive_seed;

/// Seed stream tags.
const TRAIN_DATA: u64 = 1;
const EVAL_DATA: u64 = 2;
const TRAIN_STEP: u64 = 3;
const EVAL_EPISODE: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("sampling: {0}")]
    Sampler(#[from] SamplerError),
    #[error("update: {0}")]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("episode for task {task} failed: {message}")]
    Episode { task: String, message: String },
    #[error("empty {0} dataset")]
    EmptyDataset(&'static str),
    #[error("output: {0}")]
    Io(String),
}

/// Everything one training step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub update: UpdateReport,
    /// Scored groups, by node.
    pub groups: Vec<SamplingGroup>,
    pub initial: Trajectory,
}

pub struct Trainer {
    pub config: RunConfig,
    pub env: Environment,
    pub agents: Vec<AgentSpec>,
    pub memory: BTreeMap<AgentId, MemoryStore>,
    /// Training steps taken.
    pub step: u64,
    /// Memory step counter (the `t` of memory evolution).
    pub clock: u64,
    /// Where remote training batches are written.
    pub batch_dir: Option<PathBuf>,
    mock: Option<Arc<MockPolicyServer>>,
}

/// Builds the agent roster of `env` with the backends chosen in `config`.
pub fn build_agents(
    config: &RunConfig,
    env: &Environment,
    mock: Option<&Arc<MockPolicyServer>>,
) -> Result<Vec<AgentSpec>, TrainError> {
    let remote = || -> Result<RemotePolicy, TrainError> {
        let transport: Arc<dyn Transport> = match (config.remote_address.as_deref(), mock) {
            (Some("mock"), Some(m)) => m.clone(),
            (Some(addr), _) if addr != "mock" => Arc::new(TcpTransport::new(addr, Duration::from_secs(10))),
            _ => {
                return Err(ConfigError::Invalid { key: "remote_address".into(), message: "no policy server".into() }.into())
            }
        };
        Ok(RemotePolicy::new(transport))
    };
    env.roster()
        .iter()
        .map(|b| {
            let backend = if b.role == AgentRole::Master { config.master_policy } else { config.subagent_policy };
            let policy = match backend {
                AgentBackend::Builtin => PolicyHandle::softmax(b.id.clone(), config.policy_dim, config.optimizer()),
                AgentBackend::Oracle => PolicyHandle::scripted(b.id.clone(), ScriptedRule::Oracle),
                AgentBackend::Remote => PolicyHandle::remote(b.id.clone(), remote()?),
            };
            Ok(AgentSpec { id: b.id.clone(), role: b.role, policy, tool_names: b.tools.iter().cloned().collect() })
        })
        .collect()
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let env = Environment::by_name(&config.environment)?;
        let mock = (config.remote_address.as_deref() == Some("mock"))
            .then(|| Arc::new(MockPolicyServer::new(MockBehavior::Heuristic)));
        let agents = build_agents(&config, &env, mock.as_ref())?;
        let memory = agents.iter().map(|a| (a.id.clone(), MemoryStore::new())).collect();
        Ok(Self { config, env, agents, memory, step: 0, clock: 0, batch_dir: None, mock })
    }

    /// The in-process policy server, when `remote_address = "mock"`.
    pub fn mock_server(&self) -> Option<&Arc<MockPolicyServer>> {
        self.mock.as_ref()
    }

    /// Training and evaluation tasks: dataset files when configured,
    /// otherwise generated from the environment.
    pub fn datasets(&self) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>), TrainError> {
        let load = |path: &Option<String>, n: usize, tag: u64| -> Result<Vec<TaskInstance>, TrainError> {
            match path {
                Some(p) => Ok(load_dataset(Path::new(p))?),
                None => Ok(self.env.generate_dataset(n, derive_seed(self.config.seed, &[tag]))),
            }
        };
        Ok((
            load(&self.config.train_dataset, self.config.num_train_tasks, TRAIN_DATA)?,
            load(&self.config.eval_dataset, self.config.num_eval_tasks, EVAL_DATA)?,
        ))
    }

    /// Recall of every agent for `query`, frozen for one task.
    pub fn recall(&self, query: &str) -> MemorySnapshot {
        self.memory
            .iter()
            .map(|(agent, store)| (agent.clone(), store.recall(query, self.config.recall_n)))
            .collect()
    }

    fn episode_config(&self, temperature: f64) -> EpisodeConfig {
        EpisodeConfig {
            max_steps: self.config.max_steps,
            temperature,
            clock: self.step.saturating_sub(1) * self.config.max_steps as u64,
        }
    }

    /// One full training step on `task`.
    pub fn train_step(&mut self, task: &TaskInstance, iteration: usize, epoch: usize) -> Result<StepOutcome, TrainError> {
        self.step += 1;
        self.clock += 1;
        let t = self.clock;
        let seed = derive_seed(self.config.seed, &[TRAIN_STEP, self.step]);
        let snapshot = self.recall(&task.query);
        let ep_cfg = self.episode_config(self.config.temperature);

        let initial = initial_rollout(task, &self.agents, &snapshot, &self.env, &ep_cfg, seed);
        if initial.terminated == Termination::Error || initial.is_empty() {
            return Err(TrainError::Episode {
                task: task.id.clone(),
                message: initial.error.clone().unwrap_or_else(|| "empty trajectory".into()),
            });
        }
        let k = initial.len();
        let budgets = vec![self.config.num_groups; k];
        let (groups, counts) = node_wise_sample(&initial, &budgets, &self.agents, &snapshot, &self.env, &ep_cfg, seed)?;
        let groups: Vec<SamplingGroup> =
            groups.iter().map(|g| score_group(g, self.config.efficiency_reward)).collect();

        // bounds over every membership's memory reward
        let all_rm: Vec<f64> = groups.iter().flat_map(|g| g.breakdowns.iter().map(|b| b.memory)).collect();
        let bounds = compute_bounds(&all_rm);

        // distinct rollouts: the original, then every branch by (node, draw)
        let mut distinct: Vec<(&Trajectory, f64)> = vec![(&groups[0].rollouts[0], groups[0].breakdowns[0].memory)];
        for g in &groups {
            for (r, b) in g.rollouts.iter().zip(&g.breakdowns).skip(1) {
                distinct.push((r, b.memory));
            }
        }

        let mem_cfg = self.config.memory();
        let mut audits: BTreeMap<AgentId, MemoryAudit> = self
            .memory
            .keys()
            .map(|a| {
                (a.clone(), MemoryAudit {
                    agent: a.clone(),
                    participated: vec![],
                    inserted_from: vec![],
                    size: 0,
                    min_score: None,
                    evicted: 0,
                })
            })
            .collect();
        for (idx, (rollout, r_m)) in distinct.iter().enumerate() {
            let plan = rollout.plan();
            let mode = if rollout.has_tool_call() { SimilarityMode::ToolCall } else { SimilarityMode::DirectAnswer };
            let update = MemoryUpdate { query: &task.query, plan: &plan, output: &rollout.final_answer, reward: *r_m, mode };
            for agent in rollout.agents() {
                let Some(store) = self.memory.get_mut(&agent) else { continue };
                let recalled = snapshot.get(&agent).map(Vec::as_slice).unwrap_or(&[]);
                let report = store.update(&update, recalled, t, &bounds, &mem_cfg);
                let audit = audits.get_mut(&agent).expect("audit per store");
                audit.participated.push(idx);
                if report.inserted.is_some() {
                    audit.inserted_from.push(idx);
                }
            }
        }
        for (agent, store) in self.memory.iter_mut() {
            let recalled: BTreeSet<u64> = snapshot.get(agent).into_iter().flatten().map(|m| m.id).collect();
            store.decay_others(&recalled, t, mem_cfg.alpha);
            let evicted = store.evict(mem_cfg.deletion_threshold, mem_cfg.capacity);
            let audit = audits.get_mut(agent).expect("audit per store");
            audit.evicted = evicted.below_threshold.len() + evicted.over_capacity.len();
            audit.size = store.len();
            audit.min_score = store.min_score();
        }

        let update = grpo_step(&groups, &mut self.agents, &self.config.grpo(), self.step, self.batch_dir.as_deref())?;

        let totals: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let metrics = StepMetrics {
            step: self.step,
            iteration,
            epoch,
            task_id: task.id.clone(),
            task_kind: task.kind.to_string(),
            group_variances: groups.iter().map(|g| g.reward_variance()).collect(),
            selected: update.selected.clone(),
            reward_mean: totals.iter().sum::<f64>() / totals.len() as f64,
            reward_min: totals.iter().copied().fold(f64::INFINITY, f64::min),
            reward_max: totals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            accuracy: groups[0].breakdowns[0].accuracy,
            reasoning_rounds: k,
            fresh_rollouts: counts.fresh_rollouts,
            memberships: counts.memberships,
            memory_rewards: distinct.iter().map(|(_, r)| *r).collect(),
            bounds_lower: bounds.lower,
            bounds_upper: bounds.upper,
            memory: audits.into_values().collect(),
            batch_file: update.batch_file.as_ref().map(|p| p.display().to_string()),
        };
        Ok(StepOutcome { metrics, update, groups, initial })
    }

    /// Greedy (or `eval_temperature`) episodes over `tasks`; read-only.
    pub fn evaluate(&self, tasks: &[TaskInstance]) -> EvalReport {
        let ep_cfg = EpisodeConfig { max_steps: self.config.max_steps, temperature: self.config.eval_temperature, clock: 0 };
        let results: Vec<(String, f64, usize)> = tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let snapshot = self.recall(&task.query);
                let seed = derive_seed(self.config.seed, &[EVAL_EPISODE, i as u64]);
                let traj = run_episode(task, &self.agents, &snapshot, &self.env, &ep_cfg, seed);
                (task.kind.to_string(), accuracy_reward(&traj, task), traj.len())
            })
            .collect();
        let mut kinds: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (kind, acc, _) in &results {
            let e = kinds.entry(kind.clone()).or_default();
            e.0 += acc;
            e.1 += 1;
        }
        let n = results.len();
        let mean = |f: &dyn Fn(&(String, f64, usize)) -> f64| {
            if n == 0 {
                0.0
            } else {
                results.iter().map(f).sum::<f64>() / n as f64
            }
        };
        EvalReport {
            per_kind_accuracy: kinds.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
            accuracy: mean(&|r| r.1),
            avg_reasoning_rounds: mean(&|r| r.2 as f64),
            episodes: n,
        }
    }

    /// Full schedule: `iterations` x `num_train_epochs` passes over
    /// `train`. With `out`, the metrics stream, per-epoch checkpoints,
    /// remote batches and the summary are written there.
    pub fn train(&mut self, train: &[TaskInstance], eval: &[TaskInstance], out: Option<&Path>) -> Result<RunSummary, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset("training"));
        }
        let started = Instant::now();
        let mut writer = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| TrainError::Io(e.to_string()))?;
                if self.batch_dir.is_none() {
                    self.batch_dir = Some(dir.join("batches"));
                }
                Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        let mut records = Vec::new();
        let mut emit = |record: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<(), TrainError> {
            if let Some(w) = writer.as_mut() {
                w.write(&record)?;
            }
            records.push(record);
            Ok(())
        };
        emit(MetricsRecord::RunStart { config: self.config.clone() }, &mut records)?;
        for iteration in 0..self.config.iterations {
            for epoch in 0..self.config.num_train_epochs {
                for task in train {
                    let outcome = self.train_step(task, iteration, epoch)?;
                    emit(MetricsRecord::Step(outcome.metrics), &mut records)?;
                    let every = self.config.eval_every as u64;
                    if every > 0 && self.step.is_multiple_of(every) && !eval.is_empty() {
                        let report = self.evaluate(eval);
                        emit(MetricsRecord::Eval { step: self.step, iteration, epoch, report }, &mut records)?;
                    }
                }
                if self.config.eval_every == 0 && !eval.is_empty() {
                    let report = self.evaluate(eval);
                    emit(MetricsRecord::Eval { step: self.step, iteration, epoch, report }, &mut records)?;
                }
                let checkpoint = match out {
                    Some(dir) => {
                        let path = dir.join("checkpoints").join(format!("iter{iteration}-epoch{epoch}"));
                        let cursor = RunCursor { iteration, epoch, step: self.step, clock: self.clock };
                        save_checkpoint(&path, &cursor, &self.agents, &self.memory)?;
                        path.display().to_string()
                    }
                    None => String::new(),
                };
                emit(MetricsRecord::EpochEnd { iteration, epoch, step: self.step, checkpoint }, &mut records)?;
            }
        }
        let wall_time = started.elapsed().as_secs_f64();
        emit(MetricsRecord::RunEnd { steps: self.step, wall_time }, &mut records)?;
        let summary = summarize(&records)?;
        if let Some(dir) = out {
            let text = serde_json::to_string_pretty(&summary).map_err(|e| TrainError::Io(e.to_string()))?;
            std::fs::write(dir.join("summary.json"), text).map_err(|e| TrainError::Io(e.to_string()))?;
        }
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskKind;

    fn small(env: &str) -> RunConfig {
        RunConfig {
            environment: env.into(),
            policy_dim: 256,
            learning_rate: 0.05,
            num_train_tasks: 6,
            num_eval_tasks: 6,
            num_train_epochs: 1,
            iterations: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn step_counts_and_memory_invariants() {
        let mut trainer = Trainer::new(small("cooperative")).unwrap();
        let (train, _) = trainer.datasets().unwrap();
        for task in &train {
            let before = trainer.env.episodes();
            let out = trainer.train_step(task, 0, 0).unwrap();
            let k = out.initial.len();
            assert_eq!(trainer.env.episodes() - before, 1 + 4 * k);
            assert_eq!(out.metrics.memberships, 5 * k);
            assert!(out.metrics.selected.len() <= 5);
            assert!(out.metrics.selected.iter().all(|&i| (1..=k).contains(&i)));
            for audit in &out.metrics.memory {
                assert!(audit.size <= 1024);
                assert!(audit.min_score.is_none_or(|s| s >= 0.0));
                let expected: Vec<usize> = audit
                    .participated
                    .iter()
                    .copied()
                    .filter(|&i| out.metrics.memory_rewards[i] > out.metrics.bounds_upper)
                    .collect();
                assert_eq!(audit.inserted_from, expected);
            }
        }
        assert_eq!(trainer.step, train.len() as u64);
    }

    #[test]
    fn single_node_single_branch() {
        // an oracle master that answers immediately gives k = 1
        let mut cfg = small("routing");
        cfg.num_groups = 2;
        let mut trainer = Trainer::new(cfg).unwrap();
        trainer.agents[0].policy = PolicyHandle::scripted("master_agent", ScriptedRule::Text("<answer>7</answer>".into()));
        let task = TaskInstance::new("t", TaskKind::Math, "compute 3+4", "7");
        let before = trainer.env.episodes();
        let out = trainer.train_step(&task, 0, 0).unwrap();
        assert_eq!(out.initial.len(), 1);
        assert_eq!(trainer.env.episodes() - before, 2);
        assert_eq!(out.groups.len(), 1);
        assert!(out.update.selected.len() <= 1);
    }

    #[test]
    fn evaluation_is_read_only() {
        let mut trainer = Trainer::new(small("routing")).unwrap();
        let (train, eval) = trainer.datasets().unwrap();
        for task in &train {
            trainer.train_step(task, 0, 0).unwrap();
        }
        let versions: Vec<u64> = trainer.agents.iter().map(|a| a.policy.version).collect();
        let memory = trainer.memory.clone();
        let a = trainer.evaluate(&eval);
        let b = trainer.evaluate(&eval);
        assert_eq!(a, b);
        assert_eq!(versions, trainer.agents.iter().map(|a| a.policy.version).collect::<Vec<_>>());
        assert_eq!(memory, trainer.memory);
    }

    #[test]
    fn runs_are_reproducible() {
        let run = || {
            let mut trainer = Trainer::new(small("routing")).unwrap();
            let (train, eval) = trainer.datasets().unwrap();
            let summary = trainer.train(&train, &eval, None).unwrap();
            (summary.per_kind_accuracy, summary.final_eval, summary.steps)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn disabled_recall_still_inserts() {
        let mut cfg = small("cooperative");
        cfg.recall_n = 0;
        let mut trainer = Trainer::new(cfg).unwrap();
        let (train, _) = trainer.datasets().unwrap();
        for task in &train {
            assert!(trainer.recall(&task.query).values().all(Vec::is_empty));
            trainer.train_step(task, 0, 0).unwrap();
        }
    }
}
