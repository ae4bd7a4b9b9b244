//! A small MCP-style tool protocol.
//!
//! JSON-RPC 2.0 envelopes, one per line. Only `initialize`,
//! `tools/list` and `tools/call` are spoken, plus the
//! `notifications/initialized` notification after the handshake.

mod client;
mod mock;
mod transport;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use client::{CapabilitySummary, McpClient};
pub use mock::{args_digest, sentinel_for, FixtureEntry, MockFixture, MockReply, MockToolServer};
pub use transport::{ServerEnd, Transport};

pub const PROTOCOL_VERSION: &str = "2024-11-05";
pub const JSONRPC_VERSION: &str = "2.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "inputSchema", default = "empty_schema")]
    pub input_schema: Value,
}

fn empty_schema() -> Value {
    serde_json::json!({"type": "object"})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    pub arguments: Value,
    pub call_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub payload: String,
    pub is_error: bool,
}

impl ToolResult {
    pub fn ok(payload: impl Into<String>) -> Self {
        Self {
            payload: payload.into(),
            is_error: false,
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        let mut payload: String = message.into();
        if payload.is_empty() {
            payload = "tool error".into();
        }
        Self {
            payload,
            is_error: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum McpError {
    #[error("handshake failed: {0}")]
    HandshakeFailed(String),
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}
