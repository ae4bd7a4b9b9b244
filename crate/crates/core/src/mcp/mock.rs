//! Deterministic in-process tool server driven by a fixture file.
//!
//! Fixture shape:
//!
//! ```json
//! {
//!   "server_name": "mock-search",
//!   "tools": [{"name": "web_search", "description": "...", "inputSchema": {"type": "object"}}],
//!   "responses": [
//!     {"tool": "web_search", "arguments": {"query": "x"}, "results": ["first", {"text": "boom", "is_error": true}]}
//!   ],
//!   "defaults": {"web_search": ["nothing found"]},
//!   "sentinels": true
//! }
//! ```
//!
//! Responses are keyed by tool name plus the SHA-256 of the canonical
//! argument JSON (`digest` may be given instead of `arguments`). Each key
//! hands out its results in order and repeats the last one when exhausted.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWrite, AsyncWriteExt};

use super::transport::{ServerEnd, Transport};
use super::{ToolDescriptor, JSONRPC_VERSION, PROTOCOL_VERSION};
use crate::telemetry::SENTINEL_PREFIX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Detailed {
        #[serde(default)]
        text: String,
        #[serde(default)]
        is_error: bool,
        /// Answer with a JSON-RPC error envelope instead of a result.
        #[serde(default)]
        rpc_error: bool,
        /// Repeat `text` this many times; used for oversized payloads.
        #[serde(default)]
        repeat: Option<usize>,
    },
}

impl MockReply {
    fn text(&self) -> String {
        match self {
            MockReply::Text(t) => t.clone(),
            MockReply::Detailed { text, repeat, .. } => text.repeat(repeat.unwrap_or(1)),
        }
    }

    fn is_error(&self) -> bool {
        matches!(self, MockReply::Detailed { is_error: true, .. })
    }

    fn rpc_error(&self) -> bool {
        matches!(self, MockReply::Detailed { rpc_error: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub tool: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    pub results: Vec<MockReply>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default = "default_server_name")]
    pub server_name: String,
    #[serde(default)]
    pub tools: Vec<ToolDescriptor>,
    #[serde(default)]
    pub responses: Vec<FixtureEntry>,
    #[serde(default)]
    pub defaults: BTreeMap<String, Vec<MockReply>>,
    #[serde(default)]
    pub sentinels: bool,
}

fn default_server_name() -> String {
    "mock-tools".into()
}

impl MockFixture {
    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// SHA-256 (hex) of the canonical, key-sorted JSON encoding.
pub fn args_digest(arguments: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_string(arguments).expect("json").as_bytes()))
}

pub fn sentinel_for(tool: &str, digest: &str, index: usize) -> String {
    let h = hex::encode(Sha256::digest(format!("{tool}|{digest}|{index}").as_bytes()));
    format!("{SENTINEL_PREFIX}{}", &h[..12])
}

struct State {
    table: HashMap<String, Vec<MockReply>>,
    cursors: HashMap<String, usize>,
    calls: usize,
}

#[derive(Clone)]
pub struct MockToolServer {
    fixture: Arc<MockFixture>,
    state: Arc<Mutex<State>>,
}

impl MockToolServer {
    pub fn new(fixture: MockFixture) -> Self {
        let mut table = HashMap::new();
        for entry in &fixture.responses {
            let digest = match (&entry.digest, &entry.arguments) {
                (Some(d), _) => d.clone(),
                (None, Some(args)) => args_digest(args),
                (None, None) => args_digest(&json!({})),
            };
            table
                .entry(format!("{}:{digest}", entry.tool))
                .or_insert_with(Vec::new)
                .extend(entry.results.iter().cloned());
        }
        Self {
            fixture: Arc::new(fixture),
            state: Arc::new(Mutex::new(State {
                table,
                cursors: HashMap::new(),
                calls: 0,
            })),
        }
    }

    pub fn fixture(&self) -> &MockFixture {
        &self.fixture
    }

    /// Total `tools/call` requests served.
    pub fn call_count(&self) -> usize {
        self.state.lock().unwrap().calls
    }

    /// Spawns the server on a fresh in-process transport.
    pub fn connect(&self) -> Transport {
        let (transport, end) = Transport::pair();
        tokio::spawn(self.clone().serve(end));
        transport
    }

    pub async fn serve(self, mut end: ServerEnd) {
        while let Some(line) = end.incoming.recv().await {
            if let Some(reply) = self.handle_line(&line) {
                if end.outgoing.send(reply).is_err() {
                    return;
                }
            }
        }
    }

    /// Serves newline-delimited requests until `input` ends.
    pub async fn serve_io<R, W>(self, input: R, mut output: W) -> std::io::Result<()>
    where
        R: AsyncBufRead + Unpin,
        W: AsyncWrite + Unpin,
    {
        let mut lines = input.lines();
        while let Some(line) = lines.next_line().await? {
            if let Some(reply) = self.handle_line(&line) {
                output.write_all(reply.as_bytes()).await?;
                output.write_all(b"\n").await?;
                output.flush().await?;
            }
        }
        Ok(())
    }

    /// One request line in, at most one reply line out.
    pub fn handle_line(&self, line: &str) -> Option<String> {
        let msg: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return Some(error_reply(Value::Null, -32700, &format!("parse error: {e}"))),
        };
        let method = msg["method"].as_str().unwrap_or_default();
        // Notifications get no reply.
        let id = msg.get("id").cloned()?;
        let reply = match method {
            "initialize" => result_reply(
                id,
                json!({
                    "protocolVersion": PROTOCOL_VERSION,
                    "capabilities": {"tools": {}},
                    "serverInfo": {"name": self.fixture.server_name, "version": "1.0.0"},
                }),
            ),
            "tools/list" => result_reply(id, json!({"tools": self.fixture.tools})),
            "tools/call" => self.call(id, &msg["params"]),
            other => error_reply(id, -32601, &format!("method not found: {other}")),
        };
        Some(reply)
    }

    fn call(&self, id: Value, params: &Value) -> String {
        let name = params["name"].as_str().unwrap_or_default();
        if !self.fixture.tools.iter().any(|t| t.name == name) {
            return error_reply(id, -32602, &format!("unknown tool: {name}"));
        }
        let arguments = params.get("arguments").cloned().unwrap_or_else(|| json!({}));
        let digest = args_digest(&arguments);
        let key = format!("{name}:{digest}");
        let (reply, index) = {
            let mut st = self.state.lock().unwrap();
            st.calls += 1;
            let (cursor_key, list) = match st.table.get(&key) {
                Some(list) => (key.clone(), list.clone()),
                None => match self.fixture.defaults.get(name) {
                    Some(list) => (format!("{name}:*"), list.clone()),
                    None => (key.clone(), Vec::new()),
                },
            };
            let cursor = st.cursors.entry(cursor_key).or_insert(0);
            let index = *cursor;
            *cursor += 1;
            let reply = if list.is_empty() {
                None
            } else {
                Some(list[index.min(list.len() - 1)].clone())
            };
            (reply, index)
        };
        let Some(reply) = reply else {
            return result_reply(
                id,
                json!({"content": [{"type": "text", "text": format!("no fixture response for {name}")}], "isError": true}),
            );
        };
        if reply.rpc_error() {
            return error_reply(id, -32000, &reply.text());
        }
        let mut text = reply.text();
        if self.fixture.sentinels && !reply.is_error() {
            text.push('\n');
            text.push_str(&sentinel_for(name, &digest, index));
        }
        result_reply(
            id,
            json!({"content": [{"type": "text", "text": text}], "isError": reply.is_error()}),
        )
    }
}

fn result_reply(id: Value, result: Value) -> String {
    json!({"jsonrpc": JSONRPC_VERSION, "id": id, "result": result}).to_string()
}

fn error_reply(id: Value, code: i64, message: &str) -> String {
    json!({"jsonrpc": JSONRPC_VERSION, "id": id, "error": {"code": code, "message": message}}).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcp::{McpClient, McpError, ToolResult};

    fn search_fixture() -> MockFixture {
        MockFixture::from_json_str(
            r#"{
              "server_name": "mock-search",
              "tools": [
                {"name": "web_search", "description": "Search the web", "inputSchema": {"type": "object"}},
                {"name": "fetch_page", "description": "Fetch a page", "inputSchema": {"type": "object"}}
              ],
              "responses": [
                {"tool": "web_search", "arguments": {"query": "michelin 3 star paris"},
                 "results": ["Arpege; Le Cinq; Plenitude"]},
                {"tool": "fetch_page", "arguments": {"url": "flaky"},
                 "results": [{"text": "503 upstream", "is_error": true}, "page body"]}
              ],
              "defaults": {"web_search": ["no results"]}
            }"#,
        )
        .unwrap()
    }

    #[tokio::test]
    async fn handshake_reports_tool_count() {
        let server = MockToolServer::new(search_fixture());
        let client = McpClient::initialize(server.connect()).await.unwrap();
        assert_eq!(client.summary().tool_count, 2);
        assert_eq!(client.summary().server_name, "mock-search");
        assert_eq!(client.summary().protocol_version, PROTOCOL_VERSION);
    }

    #[tokio::test]
    async fn list_is_stable() {
        let server = MockToolServer::new(search_fixture());
        let client = McpClient::initialize(server.connect()).await.unwrap();
        let a = client.list_tools().await.unwrap();
        let b = client.list_tools().await.unwrap();
        assert_eq!(a, b);
        let names: Vec<&str> = a.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["web_search", "fetch_page"]);
    }

    #[tokio::test]
    async fn empty_server_lists_nothing() {
        let server = MockToolServer::new(MockFixture::from_json_str("{}").unwrap());
        let client = McpClient::initialize(server.connect()).await.unwrap();
        assert!(client.list_tools().await.unwrap().is_empty());
        assert_eq!(client.summary().tool_count, 0);
    }

    #[tokio::test]
    async fn canned_lookup_and_default() {
        let server = MockToolServer::new(search_fixture());
        let client = McpClient::initialize(server.connect()).await.unwrap();
        let r = client
            .call_tool("web_search", json!({"query": "michelin 3 star paris"}))
            .await
            .unwrap();
        assert_eq!(r, ToolResult::ok("Arpege; Le Cinq; Plenitude"));
        let r = client.call_tool("web_search", json!({"query": "other"})).await.unwrap();
        assert_eq!(r, ToolResult::ok("no results"));
    }

    #[tokio::test]
    async fn fail_then_succeed_then_repeat_last() {
        let server = MockToolServer::new(search_fixture());
        let client = McpClient::initialize(server.connect()).await.unwrap();
        let args = json!({"url": "flaky"});
        let seen: Vec<ToolResult> = [
            client.call_tool("fetch_page", args.clone()).await.unwrap(),
            client.call_tool("fetch_page", args.clone()).await.unwrap(),
            client.call_tool("fetch_page", args).await.unwrap(),
        ]
        .to_vec();
        assert_eq!(
            seen,
            vec![
                ToolResult::error("503 upstream"),
                ToolResult::ok("page body"),
                ToolResult::ok("page body")
            ]
        );
        assert_eq!(server.call_count(), 3);
    }

    #[tokio::test]
    async fn unknown_tool_is_rejected_client_side() {
        let server = MockToolServer::new(search_fixture());
        let client = McpClient::initialize(server.connect()).await.unwrap();
        assert_eq!(
            client.call_tool("sql", json!({})).await,
            Err(McpError::UnknownTool("sql".into()))
        );
        assert_eq!(server.call_count(), 0);
    }

    #[tokio::test]
    async fn rpc_error_surfaces_as_is_error() {
        let mut fx = search_fixture();
        fx.responses.push(FixtureEntry {
            tool: "web_search".into(),
            arguments: Some(json!({"query": "boom"})),
            digest: None,
            results: vec![MockReply::Detailed {
                text: "quota exceeded".into(),
                is_error: false,
                rpc_error: true,
                repeat: None,
            }],
        });
        let client = McpClient::initialize(MockToolServer::new(fx).connect()).await.unwrap();
        let r = client.call_tool("web_search", json!({"query": "boom"})).await.unwrap();
        assert_eq!(r, ToolResult::error("quota exceeded"));
    }

    #[tokio::test]
    async fn closed_mid_handshake() {
        let (transport, end) = Transport::pair();
        drop(end);
        assert!(matches!(
            McpClient::initialize(transport).await,
            Err(McpError::HandshakeFailed(_))
        ));
    }

    #[tokio::test]
    async fn closed_after_initialize_reply() {
        let (transport, mut end) = Transport::pair();
        let server = MockToolServer::new(search_fixture());
        tokio::spawn(async move {
            let first = end.incoming.recv().await.unwrap();
            end.outgoing.send(server.handle_line(&first).unwrap()).unwrap();
        });
        assert!(matches!(
            McpClient::initialize(transport).await,
            Err(McpError::HandshakeFailed(_))
        ));
    }

    #[tokio::test]
    async fn sentinels_are_deterministic_and_distinct() {
        let mut fx = search_fixture();
        fx.sentinels = true;
        let server = MockToolServer::new(fx);
        let client = McpClient::initialize(server.connect()).await.unwrap();
        let args = json!({"query": "michelin 3 star paris"});
        let a = client.call_tool("web_search", args.clone()).await.unwrap();
        let b = client.call_tool("web_search", args.clone()).await.unwrap();
        let d = args_digest(&args);
        assert!(a.payload.ends_with(&sentinel_for("web_search", &d, 0)));
        assert!(b.payload.ends_with(&sentinel_for("web_search", &d, 1)));
        assert_ne!(a.payload, b.payload);
    }

    #[test]
    fn digest_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"b":1,"a":2}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a":2,"b":1}"#).unwrap();
        assert_eq!(args_digest(&a), args_digest(&b));
        assert_eq!(
            args_digest(&json!({})),
            // sha256("{}")
            "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a"
        );
    }

    #[test]
    fn repeat_builds_large_payloads() {
        let r: MockReply = serde_json::from_str(r#"{"text":"ab","repeat":3}"#).unwrap();
        assert_eq!(r.text(), "ababab");
    }
}
