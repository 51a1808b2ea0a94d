//! Hierarchical master/sub-agent ReAct loop.
//!
//! The master acts first. Each master action either answers (ending the
//! episode) or calls something through a `tool_call` segment:
//! * a trainable sub-agent, which then acts as the next node and hands
//!   control back to the master;
//! * a scripted sub-agent, which runs inline like a tool and adds no node;
//! * an environment tool, executed directly.
//!
//! Unknown tools produce an error response and the episode continues.
//! A trainable sub-agent is only invoked while at least two node slots
//! remain, so the master always authors the terminal node.

pub mod catalog;
pub mod env;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use env::{AgentBlueprint, EnvError, Environment};

use crate::memory::MemoryEntry;
use crate::model::{
    parse_structured_output, tool_call_name, AgentId, AgentSpec, Candidate, HistoryEntry, Observation, Tag, TaskInstance,
    Termination, Trajectory, TrajectoryNode,
};
use crate::policy::SampledAction;
use crate::text::{derive_seed, tokenize, token_f1};

/// Recalled memories per agent, frozen for a whole task.
pub type MemorySnapshot = BTreeMap<AgentId, Vec<MemoryEntry>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub temperature: f64,
    /// Added to node positions to form timestamps.
    pub clock: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { max_steps: 8, temperature: 1.2, clock: 0 }
    }
}

/// Text of a call action.
pub fn call_text(name: &str, with_reasoning: bool) -> String {
    let call = format!("<tool_call>{{\"name\":\"{name}\"}}</tool_call>");
    if with_reasoning {
        format!("<think>{name} can handle this step</think>{call}")
    } else {
        call
    }
}

/// Last line of the most recent non-empty response.
pub fn last_result(history: &[HistoryEntry]) -> Option<String> {
    history
        .iter()
        .rev()
        .find(|h| !h.response.trim().is_empty())
        .and_then(|h| h.response.lines().last())
        .map(|l| l.trim().to_string())
}

const STOPWORDS: [&str; 24] = ["a", "an", "the", "of", "to", "in", "for", "at", "from", "on", "is", "are", "was", "do", "does", "did", "i", "my", "what", "which", "how", "where", "when", "this"];

fn query_features(query: &str) -> Vec<String> {
    let words: Vec<String> = tokenize(query)
        .into_iter()
        .filter(|t| !t.chars().any(|c| c.is_ascii_digit()))
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect();
    let mut seen = BTreeSet::new();
    let mut out: Vec<String> = words.iter().filter(|t| seen.insert(t.to_string())).map(|t| format!("q:{t}")).collect();
    out.extend(words.windows(2).map(|w| format!("q:{}_{}", w[0], w[1])).filter(|f| seen.insert(f.clone())));
    out
}

struct Episode<'a> {
    task: &'a TaskInstance,
    agents: &'a [AgentSpec],
    master: usize,
    memory: &'a MemorySnapshot,
    env: &'a Environment,
    cfg: &'a EpisodeConfig,
    seed: u64,
    nodes: Vec<TrajectoryNode>,
    /// Sub-agent that acts next, if the master just delegated.
    pending: Option<usize>,
    query_features: Vec<String>,
    plan: Vec<String>,
}

enum Step {
    Continue,
    Answered(String),
}

impl<'a> Episode<'a> {
    fn new(
        task: &'a TaskInstance,
        agents: &'a [AgentSpec],
        memory: &'a MemorySnapshot,
        env: &'a Environment,
        cfg: &'a EpisodeConfig,
        seed: u64,
    ) -> Result<Self, String> {
        let master = crate::model::master_index(agents)?;
        let plan = task
            .metadata
            .get("plan")
            .map(|p| p.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect())
            .unwrap_or_default();
        Ok(Self {
            task,
            agents,
            master,
            memory,
            env,
            cfg,
            seed,
            nodes: Vec::new(),
            pending: None,
            query_features: query_features(&task.query),
            plan,
        })
    }

    fn history(&self) -> Vec<HistoryEntry> {
        self.nodes
            .iter()
            .map(|n| HistoryEntry { agent: n.agent.clone(), action: n.action_text.clone(), response: n.response.clone() })
            .collect()
    }

    fn master_turns(&self) -> usize {
        self.nodes.iter().filter(|n| n.agent == self.agents[self.master].id).count()
    }

    fn calls_by(&self, agent: &str) -> usize {
        self.nodes.iter().filter(|n| n.agent == agent && n.action.has(Tag::ToolCall)).count()
    }

    /// Content words of a tool name, or of every tool of a sub-agent.
    fn name_terms(&self, name: &str) -> BTreeSet<String> {
        let tools: Vec<&str> = match self.agents.iter().find(|a| a.id == name) {
            Some(a) => a.tool_names.iter().map(|t| t.as_str()).collect(),
            None => vec![name],
        };
        tools.iter().flat_map(|t| tokenize(&t.replace('_', " "))).filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
    }

    /// Query words not yet covered by the names of tools already executed.
    fn open_terms(&self) -> BTreeSet<String> {
        let mut terms: BTreeSet<String> =
            tokenize(&self.task.query).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect();
        for n in &self.nodes {
            if self.agents[self.master].id == n.agent {
                continue;
            }
            for name in n.action.tool_calls().filter_map(tool_call_name) {
                for t in self.name_terms(&name) {
                    terms.remove(&t);
                }
            }
        }
        terms
    }

    fn last_target(&self) -> String {
        let master = &self.agents[self.master].id;
        self.nodes
            .iter()
            .rev()
            .filter(|n| &n.agent == master)
            .find_map(|n| n.action.tool_calls().next().and_then(tool_call_name))
            .unwrap_or_else(|| "none".to_string())
    }

    /// Next unconsumed element of `plan` callable by `agent`.
    fn next_in_plan(&self, plan: &[String], agent: &AgentSpec) -> Option<String> {
        let own: Vec<&String> = plan.iter().filter(|p| agent.tool_names.contains(*p)).collect();
        own.get(self.calls_by(&agent.id)).map(|s| s.to_string())
    }

    fn observe(&self, ai: usize) -> Observation {
        let agent = &self.agents[ai];
        let history = self.history();
        let recalled = self.memory.get(&agent.id).cloned().unwrap_or_default();
        let hops = self.master_turns();
        let last = self.last_target();
        // query words conjoined with the position in the plan
        let features: Vec<String> = self.query_features.iter().map(|f| format!("{f}@{hops}:{last}")).collect();

        // logical actions: (key, body kind)
        let mut logical: Vec<(String, Option<String>)> = Vec::new();
        let answer_last = last_result(&history).unwrap_or_else(|| "no result".to_string());
        if ai == self.master {
            if hops < self.env.max_hops {
                for name in &agent.tool_names {
                    logical.push((format!("call:{name}"), None));
                }
            }
            if hops >= 1 {
                logical.push(("answer:last".to_string(), Some(answer_last)));
            }
            // a remembered answer is only offered for the very same query
            if let Some(top) = recalled.first().filter(|m| token_f1(&m.query, &self.task.query) == 1.0) {
                let body = top.answer.trim();
                if !body.is_empty() && !body.contains('<') {
                    logical.push(("answer:memory".to_string(), Some(body.to_string())));
                }
            }
        } else {
            for name in &agent.tool_names {
                logical.push((format!("call:{name}"), None));
            }
        }

        let memory_next = recalled.first().map(|top| self.next_in_plan(&top.plan, agent));
        let mut candidates = Vec::new();
        let mut seen = BTreeSet::new();
        for (key, body) in &logical {
            let mut shared = Vec::new();
            match (&memory_next, body) {
                (Some(Some(next)), None) if key == &format!("call:{next}") => shared.push("mem:plan_next".to_string()),
                (Some(None), Some(_)) if key == "answer:last" => shared.push("mem:plan_done".to_string()),
                _ => {}
            }
            if key == "answer:memory" {
                shared.push("mem:answer".to_string());
            }
            let variants = match (key.as_str(), body) {
                (_, None) => {
                    let name = &key["call:".len()..];
                    [call_text(name, true), call_text(name, false)]
                }
                ("answer:memory", Some(b)) => [format!("<think>a remembered answer fits this query</think>{b}"), format!("<answer>{b}</answer>")],
                (_, Some(b)) => [format!("<think>the last result answers the query</think>{b}"), b.clone()],
            };
            // one "match" feature per open query word named by the target
            if body.is_none() {
                let open = self.open_terms();
                let n = self.name_terms(&key["call:".len()..]).intersection(&open).count();
                shared.extend(std::iter::repeat_n("match".to_string(), n));
            }
            for (text, fmt) in variants.into_iter().zip(["fmt:think", "fmt:plain"]) {
                if seen.insert(text.clone()) {
                    let mut features = shared.clone();
                    features.push(fmt.to_string());
                    candidates.push(Candidate { key: key.clone(), text, features });
                }
            }
        }

        let hint = if self.plan.is_empty() {
            None
        } else {
            match self.next_in_plan(&self.plan, agent) {
                Some(next) => Some(format!("call:{next}")),
                None if ai == self.master => Some("answer:last".to_string()),
                None => None,
            }
        };

        Observation {
            agent: agent.id.clone(),
            query: self.task.query.clone(),
            history,
            recalled,
            features,
            tools: agent.tool_names.iter().cloned().collect(),
            candidates,
            hint,
        }
    }

    fn sample(&self, ai: usize, obs: &Observation, tags: &[u64]) -> Result<SampledAction, String> {
        let agent = &self.agents[ai];
        let mut actions = agent
            .policy
            .sample(obs, 1, self.cfg.temperature, derive_seed(self.seed, tags))
            .map_err(|e| format!("policy of {} failed: {e}", agent.id))?;
        actions.pop().ok_or_else(|| format!("policy of {} returned no action", agent.id))
    }

    fn run_tool(&self, name: &str, allowed: &BTreeSet<String>) -> String {
        let history = self.history();
        let last = last_result(&history);
        match (allowed.contains(name), self.env.call_tool(name, &self.task.query, last.as_deref())) {
            (true, Some(response)) => response,
            _ => format!("error: unknown tool '{name}'"),
        }
    }

    /// Executes the action of a sub-agent (inline or as its own node).
    fn subagent_response(&self, si: usize, action: &crate::model::StructuredOutput) -> String {
        let agent = &self.agents[si];
        if let Some(body) = action.tool_calls().next() {
            match tool_call_name(body) {
                Some(name) => self.run_tool(&name, &agent.tool_names),
                None => "error: malformed tool call".to_string(),
            }
        } else if let Some(answer) = action.answer() {
            answer.trim().to_string()
        } else {
            "error: no tool call or answer".to_string()
        }
    }

    fn step(&mut self, forced: Option<SampledAction>) -> Result<Step, String> {
        let ai = self.pending.unwrap_or(self.master);
        let j = self.nodes.len() + 1;
        let obs = self.observe(ai);
        let action = match forced {
            Some(a) => a,
            None => self.sample(ai, &obs, &[j as u64])?,
        };
        let parsed = parse_structured_output(&action.text);
        let mut node = TrajectoryNode {
            index: j,
            agent: self.agents[ai].id.clone(),
            observation: obs,
            action_text: action.text,
            action: parsed,
            action_logprob: action.logprob,
            timestamp: self.cfg.clock + j as u64,
            response: String::new(),
            delegate: None,
        };
        self.pending = None;
        if ai != self.master {
            node.response = self.subagent_response(ai, &node.action);
            self.nodes.push(node);
            return Ok(Step::Continue);
        }

        if let Some(answer) = node.action.answer().map(str::trim).filter(|a| !a.is_empty()) {
            let answer = answer.to_string();
            self.nodes.push(node);
            return Ok(Step::Answered(answer));
        }
        let master = &self.agents[self.master];
        node.response = match node.action.tool_calls().next().map(tool_call_name) {
            None => "error: no tool call or answer".to_string(),
            Some(None) => "error: malformed tool call".to_string(),
            Some(Some(name)) => {
                let sub = self.agents.iter().position(|a| a.id == name && !a.is_master());
                match sub {
                    Some(si) if master.tool_names.contains(&name) => {
                        if !self.agents[si].policy.is_trainable() {
                            // scripted sub-agents act inline, like tools
                            let sub_obs = self.observe(si);
                            let sub_action = self.sample(si, &sub_obs, &[j as u64, 1])?;
                            let sub_parsed = parse_structured_output(&sub_action.text);
                            format!("{name}: {}\n{}", sub_action.text, self.subagent_response(si, &sub_parsed))
                        } else if j + 2 <= self.cfg.max_steps {
                            node.delegate = Some(name.clone());
                            self.pending = Some(si);
                            String::new()
                        } else {
                            format!("error: no step budget left to call {name}")
                        }
                    }
                    _ => self.run_tool(&name, &master.tool_names),
                }
            }
        };
        self.nodes.push(node);
        Ok(Step::Continue)
    }

    fn run(mut self, mut forced: Option<SampledAction>) -> Trajectory {
        while self.nodes.len() < self.cfg.max_steps {
            match self.step(forced.take()) {
                Ok(Step::Continue) => {}
                Ok(Step::Answered(answer)) => return self.finish(answer, Termination::Answered, None),
                Err(e) => return self.finish(String::new(), Termination::Error, Some(e)),
            }
        }
        self.finish(String::new(), Termination::MaxSteps, None)
    }

    fn finish(self, final_answer: String, terminated: Termination, error: Option<String>) -> Trajectory {
        Trajectory { task: self.task.clone(), nodes: self.nodes, final_answer, terminated, error }
    }
}

fn failed(task: &TaskInstance, message: String) -> Trajectory {
    Trajectory {
        task: task.clone(),
        nodes: Vec::new(),
        final_answer: String::new(),
        terminated: Termination::Error,
        error: Some(message),
    }
}

/// Runs one complete episode.
pub fn run_episode(
    task: &TaskInstance,
    agents: &[AgentSpec],
    memory: &MemorySnapshot,
    env: &Environment,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Trajectory {
    env.record_episode();
    match Episode::new(task, agents, memory, env, cfg, seed) {
        Ok(ep) => ep.run(None),
        Err(e) => failed(task, e),
    }
}

/// Replays nodes `1..node` of `initial`, substitutes `action` at `node`
/// (1-based) and rolls the episode forward without further branching.
#[allow(clippy::too_many_arguments)]
pub fn run_branch(
    initial: &Trajectory,
    node: usize,
    action: SampledAction,
    agents: &[AgentSpec],
    memory: &MemorySnapshot,
    env: &Environment,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Trajectory {
    env.record_episode();
    assert!(node >= 1 && node <= initial.len(), "branch node {node} outside 1..={}", initial.len());
    let mut ep = match Episode::new(&initial.task, agents, memory, env, cfg, seed) {
        Ok(ep) => ep,
        Err(e) => return failed(&initial.task, e),
    };
    ep.nodes = initial.nodes[..node - 1].to_vec();
    ep.pending = ep
        .nodes
        .last()
        .and_then(|n| n.delegate.as_ref())
        .and_then(|d| agents.iter().position(|a| &a.id == d));
    ep.run(Some(action))
}
