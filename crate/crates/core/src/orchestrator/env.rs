//! Bundled synthetic environments.
//!
//! All three share one machinery: a roster of agents with tool sets, the
//! static tool catalog, and seeded task generators whose answers are
//! computed by the same tool functions the agents call.
//!
//! * `routing` — arithmetic, knowledge and tool-selection tasks; the master
//!   must dispatch each to the right one of four sub-agents, which must then
//!   pick the right operation / source / tool. One sub-agent call per task.
//! * `tool-selection` — the function-call agents choose among the twelve
//!   e-commerce tools and eight general tools.
//! * `cooperative` — answers need two sequential sub-agent calls: a lookup
//!   followed by a multiplication.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

use super::catalog::{self, ToolSpec, DOMAIN_TOOLS, ENTITIES, GENERAL_TOOLS, MATH_TOOLS, QA_TOOLS};
use crate::model::{AgentId, AgentRole, TaskInstance, TaskKind};
use crate::text::{derive_seed, format_number};

pub const MASTER: &str = "master_agent";
pub const QA_AGENT: &str = "qa_agent";
pub const DOMAIN_AGENT: &str = "fc_domain_agent";
pub const GENERAL_AGENT: &str = "fc_general_agent";
pub const MATH_AGENT: &str = "math_agent";

/// Names accepted by [`Environment::by_name`].
pub const ENVIRONMENTS: [&str; 3] = ["routing", "tool-selection", "cooperative"];

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("unknown environment '{0}' (expected one of routing, tool-selection, cooperative)")]
    UnknownEnvironment(String),
    #[error("environment '{env}' does not generate {kind} tasks")]
    UnsupportedKind { env: String, kind: TaskKind },
}

/// Agent definition without a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBlueprint {
    pub id: AgentId,
    pub role: AgentRole,
    pub tools: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Arithmetic,
    Knowledge,
    DomainTools,
    GeneralTools,
    Cooperative,
}

impl Family {
    fn kind(self) -> TaskKind {
        match self {
            Family::Arithmetic => TaskKind::Math,
            Family::Knowledge => TaskKind::Qa,
            Family::DomainTools | Family::GeneralTools => TaskKind::FunctionCall,
            Family::Cooperative => TaskKind::Cooperative,
        }
    }
}

#[derive(Debug)]
pub struct Environment {
    name: String,
    /// Maximum number of master calls before only answers are offered.
    pub max_hops: usize,
    roster: Vec<AgentBlueprint>,
    families: Vec<Family>,
    tools: BTreeMap<String, &'static ToolSpec>,
    episodes: AtomicUsize,
}

fn names(tools: &[ToolSpec]) -> Vec<String> {
    tools.iter().map(|t| t.name.to_string()).collect()
}

const ROUTING_DOMAIN: [&str; 4] = ["search_order_code", "check_shop_expenses", "query_logistics_status", "check_inventory"];
const ROUTING_GENERAL: [&str; 4] = ["get_weather", "get_stock_price", "search_flights", "find_recipe"];

impl Environment {
    pub fn by_name(name: &str) -> Result<Self, EnvError> {
        match name {
            "routing" => Ok(Self::routing()),
            "tool-selection" => Ok(Self::tool_selection()),
            "cooperative" => Ok(Self::cooperative()),
            other => Err(EnvError::UnknownEnvironment(other.to_string())),
        }
    }

    fn build(name: &str, max_hops: usize, subagents: Vec<(AgentId, AgentRole, Vec<String>)>, families: Vec<Family>) -> Self {
        let mut roster = vec![AgentBlueprint {
            id: MASTER.to_string(),
            role: AgentRole::Master,
            tools: subagents.iter().map(|(id, _, _)| id.clone()).collect(),
        }];
        let mut tools = BTreeMap::new();
        for (id, role, tool_names) in subagents {
            for t in &tool_names {
                tools.insert(t.clone(), catalog::find_tool(t).expect("catalog tool"));
            }
            roster.push(AgentBlueprint { id, role, tools: tool_names });
        }
        Self { name: name.to_string(), max_hops, roster, families, tools, episodes: AtomicUsize::new(0) }
    }

    pub fn routing() -> Self {
        let pick_names = |ws: &[&str]| ws.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self::build(
            "routing",
            1,
            vec![
                (QA_AGENT.into(), AgentRole::Qa, names(&QA_TOOLS)),
                (DOMAIN_AGENT.into(), AgentRole::FunctionCallDomain, pick_names(&ROUTING_DOMAIN)),
                (GENERAL_AGENT.into(), AgentRole::FunctionCallGeneral, pick_names(&ROUTING_GENERAL)),
                (MATH_AGENT.into(), AgentRole::Math, names(&MATH_TOOLS)),
            ],
            vec![Family::Arithmetic, Family::Knowledge, Family::DomainTools, Family::GeneralTools],
        )
    }

    pub fn tool_selection() -> Self {
        Self::build(
            "tool-selection",
            1,
            vec![
                (DOMAIN_AGENT.into(), AgentRole::FunctionCallDomain, names(&DOMAIN_TOOLS)),
                (GENERAL_AGENT.into(), AgentRole::FunctionCallGeneral, names(&GENERAL_TOOLS)),
            ],
            vec![Family::DomainTools, Family::GeneralTools],
        )
    }

    pub fn cooperative() -> Self {
        let pick_names = |ws: &[&str]| ws.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self::build(
            "cooperative",
            2,
            vec![
                (QA_AGENT.into(), AgentRole::Qa, pick_names(&["shipping_rates", "store_hours"])),
                (DOMAIN_AGENT.into(), AgentRole::FunctionCallDomain, pick_names(&["check_shop_expenses", "check_inventory"])),
                (GENERAL_AGENT.into(), AgentRole::FunctionCallGeneral, pick_names(&["get_stock_price", "get_weather"])),
                (MATH_AGENT.into(), AgentRole::Math, pick_names(&["add", "multiply"])),
            ],
            vec![
                Family::Cooperative,
                Family::Knowledge,
                Family::Cooperative,
                Family::DomainTools,
                Family::Cooperative,
                Family::GeneralTools,
            ],
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn roster(&self) -> &[AgentBlueprint] {
        &self.roster
    }

    /// Task kinds this environment generates.
    pub fn kinds(&self) -> Vec<TaskKind> {
        let mut kinds: Vec<TaskKind> = Vec::new();
        for f in &self.families {
            if !kinds.contains(&f.kind()) {
                kinds.push(f.kind());
            }
        }
        kinds
    }

    pub fn has_tool(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    /// Runs a tool from the tool table; `None` if the name is unknown.
    pub fn call_tool(&self, name: &str, query: &str, last_result: Option<&str>) -> Option<String> {
        self.tools.get(name).map(|spec| catalog::execute(spec, query, last_result))
    }

    /// Counts an episode (initial rollout or branch) started against this environment.
    pub fn record_episode(&self) {
        self.episodes.fetch_add(1, Ordering::SeqCst);
    }

    pub fn episodes(&self) -> usize {
        self.episodes.load(Ordering::SeqCst)
    }

    /// Deterministic task for `(kind, seed)`.
    pub fn generate_task(&self, kind: TaskKind, seed: u64) -> Result<TaskInstance, EnvError> {
        let families = self.families_of(kind);
        if families.is_empty() {
            return Err(EnvError::UnsupportedKind { env: self.name.clone(), kind });
        }
        let family = families[(seed % families.len() as u64) as usize];
        let inner = seed / families.len() as u64;
        let (query, answer, plan) = match family {
            Family::Arithmetic => arithmetic(seed),
            Family::Knowledge => knowledge(&self.subagent_tools(QA_AGENT), inner),
            Family::DomainTools => tool_request(DOMAIN_AGENT, &self.subagent_tools(DOMAIN_AGENT), inner),
            Family::GeneralTools => tool_request(GENERAL_AGENT, &self.subagent_tools(GENERAL_AGENT), inner),
            Family::Cooperative => cooperative(inner),
        };
        Ok(TaskInstance::new(format!("{}-{}-{seed}", self.name, kind), kind, query, answer).with_meta("plan", plan.join(",")))
    }

    /// `n` tasks cycling through the environment's task families, so every
    /// family (and therefore every sub-agent) gets an equal share.
    pub fn generate_dataset(&self, n: usize, seed: u64) -> Vec<TaskInstance> {
        (0..n)
            .map(|i| {
                let family = self.families[i % self.families.len()];
                let kind = family.kind();
                let same_kind = self.families_of(kind);
                let slot = same_kind.iter().position(|f| *f == family).expect("family of this environment") as u64;
                let per_kind = same_kind.len() as u64;
                let s = derive_seed(seed, &[i as u64]) % 1_000_000;
                self.generate_task(kind, s - s % per_kind + slot).expect("kind of this environment")
            })
            .collect()
    }

    /// Distinct families generating `kind`, in roster order.
    fn families_of(&self, kind: TaskKind) -> Vec<Family> {
        let mut out: Vec<Family> = Vec::new();
        for f in &self.families {
            if f.kind() == kind && !out.contains(f) {
                out.push(*f);
            }
        }
        out
    }

    fn subagent_tools(&self, agent: &str) -> Vec<&'static ToolSpec> {
        let blueprint = self.roster.iter().find(|a| a.id == agent).expect("agent in roster");
        blueprint.tools.iter().map(|t| self.tools[t]).collect()
    }
}

fn arithmetic(seed: u64) -> (String, String, Vec<String>) {
    let ops = [("+", "add"), ("-", "subtract"), ("/", "divide"), ("*", "multiply")];
    let (symbol, tool) = ops[(seed % 4) as usize];
    let a = 1000 * ((seed + 7) % 9 + 1) + 100 * ((seed / 36) % 10);
    let b = (seed / 4) % 8 + 1;
    let (query, answer) = match symbol {
        "+" => (format!("compute {a}+{b}"), a + b),
        "-" => (format!("compute {a}-{b}"), a - b),
        "/" => (format!("compute {}/{b}", a * b), a),
        _ => (format!("compute {a}*{b}"), a * b),
    };
    (query, answer.to_string(), vec![MATH_AGENT.to_string(), tool.to_string()])
}

fn entity(seed: u64) -> &'static str {
    ENTITIES[(seed % ENTITIES.len() as u64) as usize]
}

fn knowledge(sources: &[&'static ToolSpec], seed: u64) -> (String, String, Vec<String>) {
    let source = sources[(seed % sources.len() as u64) as usize];
    let e = entity(seed / sources.len() as u64);
    let query = source.phrasings[0].replace("{e}", e);
    (query, catalog::fact_text(source, e), vec![QA_AGENT.to_string(), source.name.to_string()])
}

fn tool_request(agent: &str, tools: &[&'static ToolSpec], seed: u64) -> (String, String, Vec<String>) {
    let tool = tools[(seed % tools.len() as u64) as usize];
    let rest = seed / tools.len() as u64;
    let phrasing = tool.phrasings[(rest % tool.phrasings.len() as u64) as usize];
    let e = entity(rest / tool.phrasings.len() as u64);
    (phrasing.replace("{e}", e), tool.name.to_string(), vec![agent.to_string(), tool.name.to_string()])
}

fn cooperative(seed: u64) -> (String, String, Vec<String>) {
    let template = seed % 3;
    let e = entity(seed / 3);
    let m = (seed / 3 / ENTITIES.len() as u64) % 4 + 2;
    let (agent, tool, query) = match template {
        0 => (DOMAIN_AGENT, "check_shop_expenses", format!("multiply the monthly expenses of shop {e} by {m}")),
        1 => (GENERAL_AGENT, "get_stock_price", format!("multiply the current stock price of {e} by {m}")),
        _ => (QA_AGENT, "shipping_rates", format!("multiply the standard shipping rate to {e} by {m}")),
    };
    let spec = catalog::find_tool(tool).expect("catalog tool");
    let unit = match spec.kind {
        catalog::ToolKind::Fact => crate::text::numbers_in(&catalog::fact_text(spec, e))[0],
        _ => catalog::lookup_value(spec, e),
    };
    let plan = vec![agent.to_string(), tool.to_string(), MATH_AGENT.to_string(), "multiply".to_string()];
    (query, format_number(unit * m as f64), plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_example() {
        let env = Environment::routing();
        let t = env.generate_task(TaskKind::Math, 7).unwrap();
        assert_eq!(t.query, "compute 6000*2");
        assert_eq!(t.answer, "12000");
        assert_eq!(t, env.generate_task(TaskKind::Math, 7).unwrap());
        for seed in 0..200 {
            let t = env.generate_task(TaskKind::Math, seed).unwrap();
            let mul = catalog::find_tool(t.metadata["plan"].split(',').nth(1).unwrap()).unwrap();
            assert_eq!(catalog::execute(mul, &t.query, None).lines().last().unwrap(), t.answer, "{}", t.query);
        }
    }

    #[test]
    fn tool_request_names_the_tool() {
        let env = Environment::tool_selection();
        let t = env.generate_task(TaskKind::FunctionCall, 3).unwrap();
        assert!(catalog::find_tool(&t.answer).is_some());
        assert!(t.metadata["plan"].ends_with(&t.answer));
        assert!(env.generate_task(TaskKind::Math, 3).is_err());
    }

    #[test]
    fn cooperative_answers_follow_the_plan() {
        let env = Environment::cooperative();
        for seed in 0..72 {
            let t = env.generate_task(TaskKind::Cooperative, seed).unwrap();
            let plan: Vec<&str> = t.metadata["plan"].split(',').collect();
            let first = env.call_tool(plan[1], &t.query, None).unwrap();
            let last = first.lines().last().unwrap().to_string();
            let product = env.call_tool(plan[3], &t.query, Some(&last)).unwrap();
            assert_eq!(product.lines().last().unwrap(), t.answer, "{}", t.query);
        }
    }

    #[test]
    fn datasets_cover_every_family() {
        let env = Environment::routing();
        let data = env.generate_dataset(40, 1);
        let plans: std::collections::BTreeSet<String> =
            data.iter().map(|t| t.metadata["plan"].split(',').next().unwrap().to_string()).collect();
        assert_eq!(plans.len(), 4);
        assert_eq!(data, env.generate_dataset(40, 1));
    }
}
