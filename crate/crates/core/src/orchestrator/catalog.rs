//! Static tool catalog shared by the bundled environments.
//!
//! Every tool is a pure function of the query and the previous result, so
//! episodes are reproducible. A tool response has one or more lines and the
//! last line is the result.

use crate::text::{fnv1a, format_number, numbers_in, tokenize};

/// Entities (shops, cities, companies) that queries may mention.
pub const ENTITIES: [&str; 6] = ["maple", "harbor", "summit", "willow", "cedar", "lotus"];

/// How a tool computes its result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToolKind {
    /// Structured lookup: `{"api_name": <tool>, "result": <number>}`.
    Lookup { base: u64, span: u64, step: u64 },
    /// Knowledge-base answer about the entity.
    Fact,
    /// Binary arithmetic on the first two available operands.
    Arithmetic(ArithOp),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Subtract,
    Multiply,
    Divide,
}

impl ArithOp {
    pub fn symbol(self) -> char {
        match self {
            ArithOp::Add => '+',
            ArithOp::Subtract => '-',
            ArithOp::Multiply => '*',
            ArithOp::Divide => '/',
        }
    }

    pub fn apply(self, a: f64, b: f64) -> Option<f64> {
        let v = match self {
            ArithOp::Add => a + b,
            ArithOp::Subtract => a - b,
            ArithOp::Multiply => a * b,
            ArithOp::Divide if b == 0.0 => return None,
            ArithOp::Divide => a / b,
        };
        v.is_finite().then_some(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToolSpec {
    pub name: &'static str,
    pub kind: ToolKind,
    /// Request phrasings used by tool-selection queries; `{e}` is the entity.
    pub phrasings: &'static [&'static str],
}

const fn lookup(base: u64, span: u64, step: u64) -> ToolKind {
    ToolKind::Lookup { base, span, step }
}

pub const DOMAIN_TOOLS: [ToolSpec; 12] = [
    ToolSpec {
        name: "search_order_code",
        kind: lookup(100000, 900, 7),
        phrasings: &["find the order code of my purchase at {e}", "look up which order code belongs to the {e} purchase"],
    },
    ToolSpec {
        name: "check_shop_expenses",
        kind: lookup(1000, 90, 100),
        phrasings: &["check the monthly expenses of shop {e}", "how much did shop {e} spend this month"],
    },
    ToolSpec {
        name: "search_payment_method",
        kind: lookup(1, 6, 1),
        phrasings: &["which payment method was used at {e}", "search the payment method for the {e} checkout"],
    },
    ToolSpec {
        name: "query_logistics_status",
        kind: lookup(1, 9, 1),
        phrasings: &["where is my parcel shipped from {e}", "query the logistics status of the {e} delivery"],
    },
    ToolSpec {
        name: "apply_refund",
        kind: lookup(10, 90, 1),
        phrasings: &["apply for a refund on the {e} item", "i want my money back for the {e} product"],
    },
    ToolSpec {
        name: "modify_product_price",
        kind: lookup(5, 95, 1),
        phrasings: &["change the listed price of the {e} product", "modify the product price at shop {e}"],
    },
    ToolSpec {
        name: "check_inventory",
        kind: lookup(0, 500, 1),
        phrasings: &["how many units are left in stock at {e}", "check the inventory level of warehouse {e}"],
    },
    ToolSpec {
        name: "query_promotion_rules",
        kind: lookup(5, 40, 1),
        phrasings: &["what discount promotion rules apply at {e}", "query the promotion campaign rules for {e}"],
    },
    ToolSpec {
        name: "search_customer_reviews",
        kind: lookup(1, 5, 1),
        phrasings: &["show customer reviews of shop {e}", "what do buyers say in their reviews of {e}"],
    },
    ToolSpec {
        name: "update_shop_info",
        kind: lookup(1, 3, 1),
        phrasings: &["update the contact information of shop {e}", "edit the profile info for store {e}"],
    },
    ToolSpec {
        name: "query_settlement_bill",
        kind: lookup(1000, 900, 10),
        phrasings: &["get the settlement bill of shop {e}", "query the payout statement for {e}"],
    },
    ToolSpec {
        name: "check_violation_record",
        kind: lookup(0, 4, 1),
        phrasings: &["does shop {e} have any violation record", "check penalties and violations of store {e}"],
    },
];

pub const GENERAL_TOOLS: [ToolSpec; 8] = [
    ToolSpec {
        name: "get_weather",
        kind: lookup(0, 35, 1),
        phrasings: &["what is the weather forecast in {e}", "will it rain tomorrow in {e}"],
    },
    ToolSpec {
        name: "convert_currency",
        kind: lookup(1, 50, 1),
        phrasings: &["convert dollars to the currency used in {e}", "what is the exchange rate for {e} money"],
    },
    ToolSpec {
        name: "get_stock_price",
        kind: lookup(20, 400, 1),
        phrasings: &["what is the stock price of {e} corp", "quote the current share price of {e}"],
    },
    ToolSpec {
        name: "translate_text",
        kind: lookup(1, 9, 1),
        phrasings: &["translate this sentence for visitors from {e}", "how do you say hello in the language of {e}"],
    },
    ToolSpec {
        name: "search_flights",
        kind: lookup(100, 50, 10),
        phrasings: &["find flights to {e} next week", "search for a cheap airline ticket to {e}"],
    },
    ToolSpec {
        name: "find_recipe",
        kind: lookup(1, 30, 1),
        phrasings: &["find a recipe for the famous dish of {e}", "how do i cook the {e} special soup"],
    },
    ToolSpec {
        name: "get_news_headlines",
        kind: lookup(1, 10, 1),
        phrasings: &["show today's news headlines about {e}", "what happened in {e} according to the news"],
    },
    ToolSpec {
        name: "football_season_list",
        kind: lookup(1990, 35, 1),
        phrasings: &["list the football seasons of the {e} club", "which football league seasons did {e} play"],
    },
];

pub const MATH_TOOLS: [ToolSpec; 4] = [
    ToolSpec { name: "add", kind: ToolKind::Arithmetic(ArithOp::Add), phrasings: &[] },
    ToolSpec { name: "subtract", kind: ToolKind::Arithmetic(ArithOp::Subtract), phrasings: &[] },
    ToolSpec { name: "multiply", kind: ToolKind::Arithmetic(ArithOp::Multiply), phrasings: &[] },
    ToolSpec { name: "divide", kind: ToolKind::Arithmetic(ArithOp::Divide), phrasings: &[] },
];

/// Knowledge sources of the QA agent, with the question asked of each.
pub const QA_TOOLS: [ToolSpec; 4] = [
    ToolSpec {
        name: "shipping_rates",
        kind: ToolKind::Fact,
        phrasings: &["what is the standard shipping rate to {e}"],
    },
    ToolSpec {
        name: "return_policy",
        kind: ToolKind::Fact,
        phrasings: &["how many days do i have to return goods bought in {e}"],
    },
    ToolSpec {
        name: "store_hours",
        kind: ToolKind::Fact,
        phrasings: &["when does the {e} store open"],
    },
    ToolSpec {
        name: "service_guide",
        kind: ToolKind::Fact,
        phrasings: &["where can i open the lcl consolidation service for {e}"],
    },
];

/// Looks a tool up by name across all families.
pub fn find_tool(name: &str) -> Option<&'static ToolSpec> {
    DOMAIN_TOOLS.iter().chain(&GENERAL_TOOLS).chain(&MATH_TOOLS).chain(&QA_TOOLS).find(|t| t.name == name)
}

/// First known entity mentioned in `query`, or `""`.
pub fn entity_in(query: &str) -> &'static str {
    let tokens = tokenize(query);
    ENTITIES.iter().find(|e| tokens.iter().any(|t| t == *e)).copied().unwrap_or("")
}

fn hashed(tool: &str, entity: &str) -> u64 {
    fnv1a(format!("{tool}|{entity}").as_bytes())
}

/// Numeric result of a lookup tool for `entity`.
pub fn lookup_value(tool: &ToolSpec, entity: &str) -> f64 {
    match tool.kind {
        ToolKind::Lookup { base, span, step } => base as f64 + ((hashed(tool.name, entity) % span) * step) as f64,
        _ => 0.0,
    }
}

/// Result text of a knowledge source for `entity`. Sources use disjoint
/// vocabularies so a wrong source never passes the similarity threshold.
pub fn fact_text(tool: &ToolSpec, entity: &str) -> String {
    let h = hashed(tool.name, entity);
    match tool.name {
        "shipping_rates" => format!("standard rate to {entity} is {} per kg", h % 20 + 5),
        "return_policy" => format!("returns accepted within {} days with receipt", h % 3 * 7 + 7),
        "store_hours" => format!("doors open at {} am daily", h % 4 + 7),
        "service_guide" => format!("open lcl consolidation via {entity} freight desk online"),
        _ => String::new(),
    }
}

/// Operands for an arithmetic tool: numbers in the previous result, then
/// numbers in the query; the first two are used.
pub fn operands(query: &str, last_result: Option<&str>) -> Vec<f64> {
    let mut out: Vec<f64> = last_result.map(numbers_in).unwrap_or_default();
    out.extend(numbers_in(query));
    out.truncate(2);
    out
}

/// Executes `tool`; the last response line is the result.
pub fn execute(tool: &ToolSpec, query: &str, last_result: Option<&str>) -> String {
    match tool.kind {
        ToolKind::Lookup { .. } => {
            let entity = entity_in(query);
            let value = format_number(lookup_value(tool, entity));
            format!("{} invoked for '{entity}'\n{{\"api_name\":\"{}\",\"result\":{value}}}", tool.name, tool.name)
        }
        ToolKind::Fact => format!("{} consulted\n{}", tool.name, fact_text(tool, entity_in(query))),
        ToolKind::Arithmetic(op) => match operands(query, last_result).as_slice() {
            [a, b] => match op.apply(*a, *b) {
                Some(v) => format!("{}({}, {})\n{}", tool.name, format_number(*a), format_number(*b), format_number(v)),
                None => format!("{}({}, {})\nerror: undefined result", tool.name, format_number(*a), format_number(*b)),
            },
            _ => format!("{}()\nerror: missing operands", tool.name),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::token_f1;

    #[test]
    fn catalog_names_are_unique() {
        let mut names: Vec<&str> =
            DOMAIN_TOOLS.iter().chain(&GENERAL_TOOLS).chain(&MATH_TOOLS).chain(&QA_TOOLS).map(|t| t.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(n, 28);
    }

    #[test]
    fn arithmetic_uses_previous_result_first() {
        let mul = find_tool("multiply").unwrap();
        assert_eq!(execute(mul, "compute 6000*2", None).lines().last(), Some("12000"));
        let prev = "{\"api_name\":\"check_shop_expenses\",\"result\":3500}";
        assert_eq!(execute(mul, "deposit is 3 times", Some(prev)).lines().last(), Some("10500"));
        let div = find_tool("divide").unwrap();
        assert_eq!(execute(div, "compute 7", None).lines().last(), Some("error: missing operands"));
    }

    #[test]
    fn fact_sources_are_mutually_dissimilar() {
        for e in ENTITIES {
            for a in &QA_TOOLS {
                for b in &QA_TOOLS {
                    if a.name != b.name {
                        assert!(token_f1(&fact_text(a, e), &fact_text(b, e)) < 0.6);
                    }
                }
            }
        }
    }

    #[test]
    fn lookups_are_deterministic_and_numeric() {
        let t = find_tool("check_shop_expenses").unwrap();
        let r = execute(t, "expenses of shop maple", None);
        assert_eq!(r, execute(t, "expenses of shop maple", None));
        let v = lookup_value(t, "maple");
        assert!((1000.0..=9900.0).contains(&v));
        assert_eq!(numbers_in(r.lines().last().unwrap()), vec![v]);
    }
}
