//! Domain types shared by every module, the tagged-output parser and
//! trajectory validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemoryEntry;
use crate::policy::PolicyHandle;

/// Identifier of an agent inside one multi-agent system.
pub type AgentId = String;

/// Task family; selects the accuracy rule applied by the reward module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Math,
    Qa,
    FunctionCall,
    Cooperative,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Math, TaskKind::Qa, TaskKind::FunctionCall, TaskKind::Cooperative];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Math => "math",
            TaskKind::Qa => "qa",
            TaskKind::FunctionCall => "function-call",
            TaskKind::Cooperative => "cooperative",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown task kind `{s}`"))
    }
}

/// A query with its ground-truth answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub kind: TaskKind,
    pub query: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error("dataset {0} is empty")]
    Empty(String),
}

impl TaskInstance {
    pub fn new(id: impl Into<String>, kind: TaskKind, query: impl Into<String>, answer: impl Into<String>) -> Self {
        Self { id: id.into(), kind, query: query.into(), answer: answer.into(), metadata: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    fn check(&self) -> Result<(), String> {
        if self.query.trim().is_empty() {
            return Err(format!("task {}: empty query", self.id));
        }
        if self.answer.trim().is_empty() {
            return Err(format!("task {}: empty answer", self.id));
        }
        Ok(())
    }
}

/// Reads a line-delimited dataset (`{id, kind, query, answer, metadata?}` per line).
pub fn load_dataset(path: &Path) -> Result<Vec<TaskInstance>, DatasetError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io { path: display.clone(), source })?;
    let mut tasks = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| DatasetError::Record { path: display.clone(), line: i + 1, message };
        let task: TaskInstance = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        task.check().map_err(record)?;
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(DatasetError::Empty(display));
    }
    Ok(tasks)
}

pub fn save_dataset(path: &Path, tasks: &[TaskInstance]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Tag of one segment of an agent's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Think,
    ToolCall,
    Answer,
}

impl Tag {
    fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::ToolCall => "tool_call",
            Tag::Answer => "answer",
        }
    }

    fn from_name(name: &str) -> Option<Tag> {
        match name {
            "think" => Some(Tag::Think),
            "tool_call" => Some(Tag::ToolCall),
            "answer" => Some(Tag::Answer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub tag: Tag,
    pub body: String,
}

impl Segment {
    pub fn new(tag: Tag, body: impl Into<String>) -> Self {
        Self { tag, body: body.into() }
    }
}

/// Parsed agent output. Malformed output is represented, never rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub segments: Vec<Segment>,
    pub well_formed: bool,
}

impl StructuredOutput {
    pub fn has(&self, tag: Tag) -> bool {
        self.segments.iter().any(|s| s.tag == tag)
    }

    pub fn answer(&self) -> Option<&str> {
        self.segments.iter().rev().find(|s| s.tag == Tag::Answer).map(|s| s.body.as_str())
    }

    pub fn tool_calls(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter(|s| s.tag == Tag::ToolCall).map(|s| s.body.as_str())
    }

    /// Renders back to tagged text. Answer segments are written as trailing
    /// untagged text unless their body needs explicit `<answer>` tags.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            match s.tag {
                Tag::Answer if s.body == s.body.trim() && !s.body.contains('<') => out.push_str(&s.body),
                tag => {
                    out.push('<');
                    out.push_str(tag.name());
                    out.push('>');
                    out.push_str(&s.body);
                    out.push_str("</");
                    out.push_str(tag.name());
                    out.push('>');
                }
            }
        }
        out
    }
}

/// Splits raw agent output into `think` / `tool_call` / `answer` segments.
///
/// Total: every input yields a value. Untagged trailing text becomes the
/// answer segment. Nesting, unbalanced tags, stray text between segments,
/// more than one answer or an empty output clear `well_formed`.
pub fn parse_structured_output(text: &str) -> StructuredOutput {
    let mut segments = Vec::new();
    let mut well_formed = true;
    let mut open: Option<(Tag, usize)> = None;
    let mut cursor = 0usize;

    let push_free_text = |segments: &mut Vec<Segment>, chunk: &str| {
        let trimmed = chunk.trim();
        if !trimmed.is_empty() {
            segments.push(Segment::new(Tag::Answer, trimmed));
        }
    };

    for (start, end, tag, closing) in scan_tags(text) {
        match (open, closing) {
            (None, false) => {
                push_free_text(&mut segments, &text[cursor..start]);
                open = Some((tag, end));
            }
            (None, true) => {
                // close without open: keep the text before it as free text
                well_formed = false;
                push_free_text(&mut segments, &text[cursor..start]);
            }
            (Some((current, body_start)), false) => {
                // nested open tag: best effort, close the current segment here
                well_formed = false;
                segments.push(Segment::new(current, &text[body_start..start]));
                open = Some((tag, end));
            }
            (Some((current, body_start)), true) => {
                if current != tag {
                    well_formed = false;
                }
                segments.push(Segment::new(current, &text[body_start..start]));
                open = None;
            }
        }
        cursor = end;
    }
    match open {
        Some((current, body_start)) => {
            well_formed = false;
            segments.push(Segment::new(current, &text[body_start..]));
        }
        None => push_free_text(&mut segments, &text[cursor..]),
    }

    let answers = segments.iter().filter(|s| s.tag == Tag::Answer).count();
    if answers > 1 || (answers == 1 && segments.last().map(|s| s.tag) != Some(Tag::Answer)) {
        well_formed = false;
    }
    if segments.is_empty() {
        well_formed = false;
    }
    StructuredOutput { segments, well_formed }
}

/// Finds `<tag>` / `</tag>` markers for the known tags: (start, end, tag, is_close).
fn scan_tags(text: &str) -> Vec<(usize, usize, Tag, bool)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            let closing = bytes.get(i + 1) == Some(&b'/');
            let name_start = if closing { i + 2 } else { i + 1 };
            if let Some(rel) = text[name_start..].find('>') {
                let name = &text[name_start..name_start + rel];
                if let Some(tag) = Tag::from_name(name) {
                    let end = name_start + rel + 1;
                    out.push((i, end, tag, closing));
                    i = end;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

/// How an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    MaxSteps,
    Error,
}

/// One candidate action offered to a policy: `key` identifies the logical
/// action across observations, `text` is the literal output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub key: String,
    pub text: String,
    /// Features shared across candidate keys (e.g. agreement with a
    /// recalled plan); hashed as-is rather than crossed with the key.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<String>,
}

impl Candidate {
    pub fn new(key: impl Into<String>, text: impl Into<String>) -> Self {
        Self { key: key.into(), text: text.into(), features: Vec::new() }
    }
}

/// A prior exchange visible to later agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub agent: AgentId,
    pub action: String,
    pub response: String,
}

/// Everything an agent sees when it acts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: AgentId,
    pub query: String,
    pub history: Vec<HistoryEntry>,
    pub recalled: Vec<MemoryEntry>,
    /// Discrete observation features consumed by the hashed-feature policy.
    pub features: Vec<String>,
    /// Tools (or sub-agents) the acting agent may call.
    pub tools: Vec<String>,
    /// Candidate actions (the support of built-in policies).
    pub candidates: Vec<Candidate>,
    /// Key of the environment's reference action. Only scripted oracle
    /// policies read it; it is never part of the context sent to learners.
    #[serde(skip)]
    pub hint: Option<String>,
}

impl Observation {
    /// Observation with only an agent and a query.
    pub fn bare(agent: impl Into<AgentId>, query: impl Into<String>) -> Self {
        Self {
            agent: agent.into(),
            query: query.into(),
            history: Vec::new(),
            recalled: Vec::new(),
            features: Vec::new(),
            tools: Vec::new(),
            candidates: Vec::new(),
            hint: None,
        }
    }

    /// Plain concatenation used as the context sent to remote policies.
    pub fn context(&self) -> String {
        let mut out = String::new();
        out.push_str("<query>");
        out.push_str(&self.query);
        out.push_str("</query>\n<tools>");
        out.push_str(&serde_json::to_string(&self.tools).unwrap_or_default());
        out.push_str("</tools>\n<memory>");
        let memory: Vec<serde_json::Value> = self
            .recalled
            .iter()
            .map(|m| serde_json::json!({"query": m.query, "plan": m.plan, "answer": m.answer, "score": m.score}))
            .collect();
        out.push_str(&serde_json::to_string(&memory).unwrap_or_default());
        out.push_str("</memory>\n");
        for h in &self.history {
            out.push_str(&format!("<turn agent=\"{}\">{}\n{}</turn>\n", h.agent, h.action, h.response));
        }
        out
    }

    pub fn candidate_index(&self, text: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.text == text)
    }
}

/// One agent action inside a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryNode {
    /// 1-based position in the trajectory.
    pub index: usize,
    pub agent: AgentId,
    pub observation: Observation,
    pub action_text: String,
    pub action: StructuredOutput,
    pub action_logprob: f64,
    pub timestamp: u64,
    /// Tool or sub-agent response produced by this action, if any.
    pub response: String,
    /// Trainable sub-agent that acts next because this node delegated to it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delegate: Option<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: TaskInstance,
    pub nodes: Vec<TrajectoryNode>,
    pub final_answer: String,
    pub terminated: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tool/sub-agent identifiers called along the trajectory, in order.
    pub fn plan(&self) -> Vec<String> {
        self.nodes
            .iter()
            .flat_map(|n| n.action.tool_calls().map(tool_call_name).collect::<Vec<_>>())
            .flatten()
            .collect()
    }

    pub fn has_tool_call(&self) -> bool {
        self.nodes.iter().any(|n| n.action.has(Tag::ToolCall))
    }

    pub fn agents(&self) -> BTreeSet<AgentId> {
        self.nodes.iter().map(|n| n.agent.clone()).collect()
    }

    pub fn to_trace(&self) -> TraceRecord {
        TraceRecord {
            task_id: self.task.id.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| TraceNode {
                    j: n.index,
                    agent: n.agent.clone(),
                    action_segments: n.action.segments.clone(),
                    logprob: n.action_logprob,
                    timestamp: n.timestamp,
                })
                .collect(),
            final_answer: self.final_answer.clone(),
            terminated: self.terminated,
        }
    }
}

/// Extracts the `name` field of a tool-call body (JSON object), falling back
/// to a bare identifier body.
pub fn tool_call_name(body: &str) -> Option<String> {
    let body = body.trim();
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(body) {
        for key in ["name", "api_name"] {
            if let Some(serde_json::Value::String(s)) = map.get(key) {
                return Some(s.clone());
            }
        }
        return None;
    }
    let ident = body.chars().all(|c| c.is_alphanumeric() || c == '_');
    (ident && !body.is_empty()).then(|| body.to_string())
}

/// Line-delimited trace format for trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub task_id: String,
    pub nodes: Vec<TraceNode>,
    pub final_answer: String,
    pub terminated: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceNode {
    pub j: usize,
    pub agent: AgentId,
    pub action_segments: Vec<Segment>,
    pub logprob: f64,
    pub timestamp: u64,
}

/// Returns every violated trajectory invariant; empty when valid.
// negated comparisons also reject NaN
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn validate_trajectory(traj: &Trajectory) -> Vec<String> {
    let mut problems = Vec::new();
    if traj.nodes.is_empty() {
        problems.push("empty trajectory".to_string());
    }
    if traj.nodes.iter().enumerate().any(|(i, n)| n.index != i + 1) {
        problems.push("non-consecutive node index".to_string());
    }
    if traj.nodes.iter().any(|n| !(n.action_logprob <= 0.0)) {
        problems.push("positive or non-finite action logprob".to_string());
    }
    let answered = traj.terminated == Termination::Answered;
    if answered && traj.final_answer.trim().is_empty() {
        problems.push("missing final answer".to_string());
    }
    if !answered && !traj.final_answer.is_empty() {
        problems.push("final answer on unanswered trajectory".to_string());
    }
    if traj.nodes.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        problems.push("timestamps decrease".to_string());
    }
    problems
}

/// Hierarchical role of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Master,
    Qa,
    FunctionCallDomain,
    FunctionCallGeneral,
    Math,
}

#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub id: AgentId,
    pub role: AgentRole,
    pub policy: PolicyHandle,
    pub tool_names: BTreeSet<String>,
}

impl AgentSpec {
    pub fn is_master(&self) -> bool {
        self.role == AgentRole::Master
    }
}

/// Checks that exactly one agent is the master; returns its position.
pub fn master_index(agents: &[AgentSpec]) -> Result<usize, String> {
    let masters: Vec<usize> = agents.iter().enumerate().filter(|(_, a)| a.is_master()).map(|(i, _)| i).collect();
    match masters.as_slice() {
        [one] => Ok(*one),
        [] => Err("no master agent".to_string()),
        _ => Err(format!("{} master agents, expected exactly one", masters.len())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(tag: Tag, body: &str) -> Segment {
        Segment::new(tag, body)
    }

    #[test]
    fn parses_think_and_tool_call() {
        let out = parse_structured_output("<think>a</think><tool_call>{\"name\":\"t\"}</tool_call>");
        assert!(out.well_formed);
        assert_eq!(out.segments, vec![seg(Tag::Think, "a"), seg(Tag::ToolCall, "{\"name\":\"t\"}")]);
    }

    #[test]
    fn trailing_text_is_the_answer() {
        let out = parse_structured_output("<think>a</think>12000");
        assert!(out.well_formed);
        assert_eq!(out.segments, vec![seg(Tag::Think, "a"), seg(Tag::Answer, "12000")]);
        assert_eq!(out.answer(), Some("12000"));
    }

    #[test]
    fn unbalanced_tags_are_best_effort() {
        let out = parse_structured_output("<think>a<tool_call>x");
        assert!(!out.well_formed);
        assert_eq!(out.segments, vec![seg(Tag::Think, "a"), seg(Tag::ToolCall, "x")]);
    }

    #[test]
    fn other_malformations() {
        assert!(!parse_structured_output("").well_formed);
        assert!(!parse_structured_output("x</think>y").well_formed);
        assert!(!parse_structured_output("<think>a</tool_call>").well_formed);
        assert!(!parse_structured_output("first<think>a</think>second").well_formed);
        assert!(parse_structured_output("<answer>42</answer>").well_formed);
        assert!(parse_structured_output("just text").well_formed);
        // unknown tags are plain text
        let out = parse_structured_output("<b>x</b>");
        assert_eq!(out.segments, vec![seg(Tag::Answer, "<b>x</b>")]);
    }

    #[test]
    fn tool_call_names() {
        assert_eq!(tool_call_name("{\"name\": \"math_agent\", \"arguments\": {}}").as_deref(), Some("math_agent"));
        assert_eq!(tool_call_name("{\"api_name\": \"x\"}").as_deref(), Some("x"));
        assert_eq!(tool_call_name("search_order_code").as_deref(), Some("search_order_code"));
        assert_eq!(tool_call_name("not json {"), None);
    }

    fn node(index: usize) -> TrajectoryNode {
        TrajectoryNode {
            index,
            agent: "master".into(),
            observation: Observation::bare("master", "q"),
            action_text: "<think>x</think>1".into(),
            action: parse_structured_output("<think>x</think>1"),
            action_logprob: -0.5,
            timestamp: index as u64,
            response: String::new(),
            delegate: None,
        }
    }

    fn traj(indices: &[usize], term: Termination, answer: &str) -> Trajectory {
        Trajectory {
            task: TaskInstance::new("t", TaskKind::Math, "q", "1"),
            nodes: indices.iter().map(|&i| node(i)).collect(),
            final_answer: answer.into(),
            terminated: term,
            error: None,
        }
    }

    #[test]
    fn validation_examples() {
        assert!(validate_trajectory(&traj(&[1, 2, 3], Termination::Answered, "1")).is_empty());
        assert_eq!(validate_trajectory(&traj(&[1, 3], Termination::Answered, "1")), vec!["non-consecutive node index"]);
        assert_eq!(validate_trajectory(&traj(&[1], Termination::Answered, "")), vec!["missing final answer"]);
        let mut t = traj(&[1], Termination::MaxSteps, "");
        t.nodes[0].action_logprob = 0.1;
        assert_eq!(validate_trajectory(&t), vec!["positive or non-finite action logprob"]);
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let tasks = vec![
            TaskInstance::new("a", TaskKind::Math, "compute 6000*2", "12000"),
            TaskInstance::new("b", TaskKind::FunctionCall, "q", "search_order_code").with_meta("domain", "ecommerce"),
        ];
        save_dataset(&path, &tasks).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"id\":\"a\",\"kind\":\"math\",\"query\""));
        assert!(text.contains("\"kind\":\"function-call\""));
        assert_eq!(load_dataset(&path).unwrap(), tasks);
    }

    #[test]
    fn dataset_rejects_empty_answer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"kind\":\"qa\",\"query\":\"q\",\"answer\":\"\"}\n").unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains("empty answer"), "{err}");
    }
}
