//! Joint-evolution training for hierarchical multi-agent systems.
//!
//! A master agent routes queries to sub-agents that call tools. Training
//! alternates node-wise Monte Carlo sampling, group-relative policy updates
//! on the highest-variance nodes, and reward-driven evolution of each
//! agent's memory.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod grpo;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod policy;
pub mod reward;
pub mod sampler;
pub mod text;
pub mod trainer;
