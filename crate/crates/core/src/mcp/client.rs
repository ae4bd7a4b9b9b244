use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::process::Child;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use super::transport::{LineSink, LineSource, Transport};
use super::{McpError, ToolDescriptor, ToolResult, JSONRPC_VERSION, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilitySummary {
    pub protocol_version: String,
    pub server_name: String,
    pub server_version: String,
    pub tool_count: usize,
}

type Reply = Result<Value, McpError>;

#[derive(Default)]
struct Pending {
    waiters: HashMap<u64, oneshot::Sender<Reply>>,
    closed: bool,
}

struct Shared {
    pending: Mutex<Pending>,
    transcript: Mutex<Vec<String>>,
}

impl Shared {
    fn record(&self, line: String) {
        self.transcript.lock().unwrap().push(line);
    }

    fn fail_all(&self, why: &str) {
        let mut p = self.pending.lock().unwrap();
        p.closed = true;
        for (_, tx) in p.waiters.drain() {
            let _ = tx.send(Err(McpError::TransportError(why.to_string())));
        }
    }
}

/// Client for one tool server connection. Safe to share between
/// concurrent callers: writes are serialized and replies are matched
/// to requests by id.
pub struct McpClient {
    sink: tokio::sync::Mutex<Box<dyn LineSink>>,
    shared: Arc<Shared>,
    next_id: AtomicU64,
    tools: Mutex<Vec<ToolDescriptor>>,
    summary: CapabilitySummary,
    reader: JoinHandle<()>,
    _child: Option<Child>,
}

impl Drop for McpClient {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

async fn read_loop(mut source: Box<dyn LineSource>, shared: Arc<Shared>) {
    loop {
        match source.next_line().await {
            Ok(Some(line)) => {
                shared.record(format!("<- {line}"));
                let Ok(msg) = serde_json::from_str::<Value>(&line) else {
                    continue;
                };
                // Server-initiated requests and notifications are ignored.
                let Some(id) = msg.get("id").and_then(Value::as_u64) else {
                    continue;
                };
                if msg.get("result").is_none() && msg.get("error").is_none() {
                    continue;
                }
                let waiter = shared.pending.lock().unwrap().waiters.remove(&id);
                if let Some(tx) = waiter {
                    let _ = tx.send(Ok(msg));
                }
            }
            Ok(None) => {
                shared.fail_all("connection closed");
                return;
            }
            Err(e) => {
                shared.fail_all(&e.to_string());
                return;
            }
        }
    }
}

impl McpClient {
    /// Performs the handshake and caches the server's tool list.
    pub async fn initialize(transport: Transport) -> Result<McpClient, McpError> {
        let Transport { sink, source, child } = transport;
        let shared = Arc::new(Shared {
            pending: Mutex::new(Pending::default()),
            transcript: Mutex::new(Vec::new()),
        });
        let reader = tokio::spawn(read_loop(source, shared.clone()));
        let mut client = McpClient {
            sink: tokio::sync::Mutex::new(sink),
            shared,
            next_id: AtomicU64::new(1),
            tools: Mutex::new(Vec::new()),
            summary: CapabilitySummary {
                protocol_version: String::new(),
                server_name: String::new(),
                server_version: String::new(),
                tool_count: 0,
            },
            reader,
            _child: child,
        };
        let hs = |e: McpError| McpError::HandshakeFailed(e.to_string());
        let init = client
            .request(
                "initialize",
                json!({
                    "protocolVersion": PROTOCOL_VERSION,
                    "capabilities": {},
                    "clientInfo": {"name": "infoseeker", "version": env!("CARGO_PKG_VERSION")},
                }),
            )
            .await
            .map_err(hs)?;
        let result = init
            .get("result")
            .ok_or_else(|| McpError::HandshakeFailed(format!("initialize rejected: {}", init["error"])))?;
        client
            .notify("notifications/initialized", json!({}))
            .await
            .map_err(hs)?;
        let tools = client.fetch_tools().await.map_err(hs)?;
        client.summary = CapabilitySummary {
            protocol_version: result["protocolVersion"].as_str().unwrap_or_default().to_string(),
            server_name: result["serverInfo"]["name"].as_str().unwrap_or_default().to_string(),
            server_version: result["serverInfo"]["version"].as_str().unwrap_or_default().to_string(),
            tool_count: tools.len(),
        };
        *client.tools.lock().unwrap() = tools;
        Ok(client)
    }

    pub fn summary(&self) -> &CapabilitySummary {
        &self.summary
    }

    /// Every line sent (`-> `) and received (`<- `), in observed order.
    pub fn transcript(&self) -> Vec<String> {
        self.shared.transcript.lock().unwrap().clone()
    }

    pub fn cached_tools(&self) -> Vec<ToolDescriptor> {
        self.tools.lock().unwrap().clone()
    }

    pub async fn list_tools(&self) -> Result<Vec<ToolDescriptor>, McpError> {
        let tools = self.fetch_tools().await?;
        *self.tools.lock().unwrap() = tools.clone();
        Ok(tools)
    }

    /// Invokes a tool. Server-side failures come back as `is_error` results.
    pub async fn call_tool(&self, name: &str, arguments: Value) -> Result<ToolResult, McpError> {
        if !self.tools.lock().unwrap().iter().any(|t| t.name == name) {
            return Err(McpError::UnknownTool(name.to_string()));
        }
        let reply = self
            .request("tools/call", json!({"name": name, "arguments": arguments}))
            .await?;
        if let Some(err) = reply.get("error") {
            let message = err["message"].as_str().unwrap_or_default();
            return Ok(ToolResult::error(message));
        }
        let result = &reply["result"];
        let text = result["content"]
            .as_array()
            .map(|items| {
                items
                    .iter()
                    .filter(|c| c["type"] == "text")
                    .filter_map(|c| c["text"].as_str())
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .unwrap_or_default();
        if result["isError"].as_bool().unwrap_or(false) {
            Ok(ToolResult::error(text))
        } else {
            Ok(ToolResult::ok(text))
        }
    }

    async fn fetch_tools(&self) -> Result<Vec<ToolDescriptor>, McpError> {
        let reply = self.request("tools/list", json!({})).await?;
        if let Some(err) = reply.get("error") {
            return Err(McpError::Protocol(format!("tools/list failed: {err}")));
        }
        serde_json::from_value(reply["result"]["tools"].clone())
            .map_err(|e| McpError::Protocol(format!("bad tools/list result: {e}")))
    }

    async fn notify(&self, method: &str, params: Value) -> Result<(), McpError> {
        let line = json!({"jsonrpc": JSONRPC_VERSION, "method": method, "params": params}).to_string();
        self.write(line).await
    }

    async fn request(&self, method: &str, params: Value) -> Result<Value, McpError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = oneshot::channel();
        {
            let mut p = self.shared.pending.lock().unwrap();
            if p.closed {
                return Err(McpError::TransportError("connection closed".into()));
            }
            p.waiters.insert(id, tx);
        }
        let line = json!({"jsonrpc": JSONRPC_VERSION, "id": id, "method": method, "params": params}).to_string();
        if let Err(e) = self.write(line).await {
            self.shared.pending.lock().unwrap().waiters.remove(&id);
            return Err(e);
        }
        rx.await
            .map_err(|_| McpError::TransportError("reply channel dropped".into()))?
    }

    async fn write(&self, line: String) -> Result<(), McpError> {
        let mut sink = self.sink.lock().await;
        // Recorded under the write lock so transcript order matches wire order.
        self.shared.record(format!("-> {line}"));
        sink.send_line(&line).await
    }
}
