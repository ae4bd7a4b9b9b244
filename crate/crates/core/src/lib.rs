//! Hierarchical information-seeking engine: a host that plans steps,
//! managers that fan each step out to parallel workers, and workers that
//! call tools over a small MCP-style protocol.

pub mod backends;
pub mod config;
pub mod domain;
pub mod host;
pub mod manager;
pub mod mcp;
pub mod scheduler;
pub mod simharness;
pub mod telemetry;
pub mod templates;
pub mod worker;

pub use config::{Engine, EngineConfig, Overrides};
pub use domain::{FinalAnswer, HostContext, TaskId, TaskQuery};
pub use host::{Host, HostConfig, ManagerRegistry, TaskFailed, TaskRun};
