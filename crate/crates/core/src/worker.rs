//! Worker tier: one subtask, a bounded tool loop, one result upward.
//!
//! The backend asks for a tool by replying with exactly one JSON document
//! `{"tool": .., "arguments": {..}, "note": ..}`; any other reply is the
//! final answer. Full tool payloads stay in the worker-local trace file; the
//! run trace only gets a preview plus any sentinel markers.

use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::backends::{CompletionBackend, CompletionRequest, Role, Turn};
use crate::domain::{Subtask, SubtaskStatus, TaskId};
use crate::mcp::{McpClient, McpError, ToolResult};
use crate::scheduler::{PartialText, RunSlot, RunnerOutput, SubtaskRunner};
use crate::telemetry::{find_sentinels, Actor, ClockKind, EventKind, PendingEvent, TraceEvent};
use crate::templates::{Templates, WORKER};

pub const DEFAULT_MAX_TOOL_TURNS: usize = 12;
pub const DEFAULT_TOOL_RETRY_LIMIT: usize = 3;
const PREVIEW_CHARS: usize = 240;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub max_tool_turns: usize,
    pub tool_retry_limit: usize,
    /// Root for per-subtask trace files; `None` keeps nothing on disk.
    pub trace_dir: Option<PathBuf>,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            max_tool_turns: DEFAULT_MAX_TOOL_TURNS,
            tool_retry_limit: DEFAULT_TOOL_RETRY_LIMIT,
            trace_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolCallDoc {
    tool: String,
    #[serde(default = "empty_object")]
    arguments: Value,
    #[serde(default)]
    note: Option<String>,
}

fn empty_object() -> Value {
    Value::Object(Map::new())
}

fn parse_tool_call(text: &str) -> Option<ToolCallDoc> {
    serde_json::from_str::<ToolCallDoc>(text.trim())
        .ok()
        .filter(|d| !d.tool.is_empty() && d.arguments.is_object())
}

fn preview(text: &str) -> String {
    text.chars().take(PREVIEW_CHARS).collect()
}

/// Runs subtasks for one manager against its tool server.
pub struct Worker {
    cfg: WorkerConfig,
    manager: String,
    task_id: TaskId,
    backend: Arc<dyn CompletionBackend>,
    tools: Arc<McpClient>,
    templates: Arc<Templates>,
}

impl Worker {
    pub fn new(
        cfg: WorkerConfig,
        manager: impl Into<String>,
        task_id: TaskId,
        backend: Arc<dyn CompletionBackend>,
        tools: Arc<McpClient>,
        templates: Arc<Templates>,
    ) -> Self {
        assert!(cfg.max_tool_turns >= 1, "max_tool_turns must be at least 1");
        Self {
            cfg,
            manager: manager.into(),
            task_id,
            backend,
            tools,
            templates,
        }
    }

    fn routes(&self, st: &Subtask) -> Vec<String> {
        let m = &self.manager;
        vec![
            format!("{m}:worker:{}:{}:{}", st.step_index, st.slot, st.revision),
            format!("{m}:worker:{}:{}", st.step_index, st.slot),
            format!("{m}:worker"),
        ]
    }

    fn tool_lines(&self) -> String {
        let tools = self.tools.cached_tools();
        if tools.is_empty() {
            return "(none)".into();
        }
        tools
            .iter()
            .map(|t| format!("- {}: {}", t.name, t.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Runs the tool loop for `st`. Never fails; problems become statuses.
    pub async fn run_subtask(&self, st: &Subtask, partial: &PartialText) -> WorkerRun {
        let mut run = WorkerRun::default();
        let step = Some(st.step_index);
        let prompt = self.templates.render(
            WORKER,
            &[
                ("subtask", &st.text),
                ("tools", &self.tool_lines()),
                ("max_tool_turns", &self.cfg.max_tool_turns.to_string()),
            ],
        );
        let mut transcript = vec![Turn::new("user", prompt)];
        let routes = self.routes(st);
        let base = json!({"manager": self.manager, "slot": st.slot, "revision": st.revision});

        loop {
            let req = CompletionRequest::new(Role::Worker, "", transcript.clone()).with_routes(routes.clone());
            let completion = match self.backend.complete(&req).await {
                Ok(c) => c,
                Err(e) => {
                    let mut payload = base.clone();
                    payload["code"] = json!(e.code());
                    payload["message"] = json!(e.to_string());
                    if let crate::backends::BackendError::TokenLimitExceeded { tokens, limit } = e {
                        payload["tokens"] = json!(tokens);
                        payload["limit"] = json!(limit);
                    }
                    run.push(PendingEvent::new(Actor::Worker, EventKind::Error, step, payload), false);
                    run.finish(SubtaskStatus::ToolError, format!("worker backend failed: {e}"));
                    return run;
                }
            };
            run.tokens_in += completion.prompt_tokens;
            run.tokens_out += completion.completion_tokens;

            let Some(call) = parse_tool_call(&completion.text) else {
                let text = completion.text.trim().to_string();
                if text.is_empty() {
                    run.finish(SubtaskStatus::ToolError, "worker produced an empty answer");
                } else {
                    partial.set(text.clone());
                    run.finish(SubtaskStatus::Ok, text);
                }
                return run;
            };
            if run.tool_turns == self.cfg.max_tool_turns {
                run.finish(
                    SubtaskStatus::ToolError,
                    format!("turn budget exhausted after {} tool turns", run.tool_turns),
                );
                return run;
            }
            run.tool_turns += 1;
            if let Some(note) = &call.note {
                partial.set(note.clone());
            }
            transcript.push(Turn::new("assistant", completion.text.clone()));

            let mut attempt = 0;
            let mut unknown = false;
            let result = loop {
                let call_index = run.tool_call_count;
                run.tool_call_count += 1;
                let mut payload = base.clone();
                payload["tool"] = json!(call.tool);
                payload["arguments"] = call.arguments.clone();
                payload["call_index"] = json!(call_index);
                payload["attempt"] = json!(attempt + 1);
                run.push(PendingEvent::new(Actor::Worker, EventKind::ToolCall, step, payload), false);

                let outcome = self.tools.call_tool(&call.tool, call.arguments.clone()).await;
                let result = match outcome {
                    Ok(r) => r,
                    Err(McpError::UnknownTool(name)) => {
                        unknown = true;
                        ToolResult::error(format!("unknown tool `{name}`"))
                    }
                    Err(e) => {
                        run.push(self.result_event(&base, step, &call.tool, call_index, &ToolResult::error(e.to_string())), true);
                        run.finish(SubtaskStatus::ToolError, format!("tool transport failed: {e}"));
                        return run;
                    }
                };
                run.push(self.result_event(&base, step, &call.tool, call_index, &result), true);
                run.local_payloads.push(result.payload.clone());
                if result.is_error && !unknown && attempt < self.cfg.tool_retry_limit {
                    attempt += 1;
                    continue;
                }
                break result;
            };
            if result.is_error && !unknown {
                run.finish(
                    SubtaskStatus::ToolError,
                    format!(
                        "tool `{}` failed after {} attempts: {}",
                        call.tool,
                        attempt + 1,
                        preview(&result.payload)
                    ),
                );
                return run;
            }
            let fed = if result.is_error {
                format!("ERROR: {}", result.payload)
            } else {
                result.payload
            };
            transcript.push(Turn::new("tool", fed));
        }
    }

    fn result_event(
        &self,
        base: &Value,
        step: Option<u32>,
        tool: &str,
        call_index: usize,
        result: &ToolResult,
    ) -> PendingEvent {
        let mut payload = base.clone();
        payload["tool"] = json!(tool);
        payload["call_index"] = json!(call_index);
        payload["is_error"] = json!(result.is_error);
        payload["payload_chars"] = json!(result.payload.chars().count());
        payload["preview"] = json!(preview(&result.payload));
        payload["sentinels"] = json!(find_sentinels(&result.payload));
        PendingEvent::new(Actor::Tool, EventKind::ToolResult, step, payload)
    }

    fn write_local_trace(&self, st: &Subtask, slot: RunSlot, run: &WorkerRun) -> Option<String> {
        let dir = self.cfg.trace_dir.as_ref()?;
        let path = dir
            .join(self.task_id.as_str())
            .join(st.step_index.to_string())
            .join(format!("{}.{}.trace", st.slot, st.revision));
        std::fs::create_dir_all(path.parent()?).ok()?;
        let time = slot.wave_start + slot.start_offset;
        let mut payloads = run.local_payloads.iter();
        let mut out = String::new();
        for (seq, (evt, is_result)) in run.events.iter().enumerate() {
            let mut payload = evt.payload.clone();
            if *is_result {
                if let Some(full) = payloads.next() {
                    payload["payload"] = json!(full);
                }
            }
            let line = TraceEvent {
                seq: seq as u64,
                time,
                clock: ClockKind::Virtual,
                actor: evt.actor,
                kind: evt.kind,
                step: evt.step,
                payload,
                tokens_in: evt.tokens_in,
                tokens_out: evt.tokens_out,
            };
            out.push_str(&serde_json::to_string(&line).ok()?);
            out.push('\n');
        }
        std::fs::write(&path, out).ok()?;
        Some(path.to_string_lossy().into_owned())
    }
}

/// Everything a single subtask run produced.
#[derive(Debug, Clone, Default)]
pub struct WorkerRun {
    pub status: Option<SubtaskStatus>,
    pub text: String,
    pub tool_call_count: usize,
    pub tool_turns: usize,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Events with a flag marking tool results.
    events: Vec<(PendingEvent, bool)>,
    /// Full payloads for tool results, in order (transport failures excluded).
    local_payloads: Vec<String>,
}

impl WorkerRun {
    fn push(&mut self, evt: PendingEvent, is_result: bool) {
        self.events.push((evt, is_result));
    }

    fn finish(&mut self, status: SubtaskStatus, text: impl Into<String>) {
        self.status = Some(status);
        self.text = text.into();
    }

    pub fn events(&self) -> Vec<PendingEvent> {
        self.events.iter().map(|(e, _)| e.clone()).collect()
    }
}

#[async_trait]
impl SubtaskRunner for Worker {
    async fn run(&self, st: Subtask, slot: RunSlot, partial: PartialText) -> RunnerOutput {
        let mut run = self.run_subtask(&st, &partial).await;
        // A transport failure pushes a result event without a local payload.
        while run.local_payloads.len() < run.events.iter().filter(|(_, r)| *r).count() {
            run.local_payloads.push(String::new());
        }
        let local_trace_path = self.write_local_trace(&st, slot, &run);
        RunnerOutput {
            status: run.status.unwrap_or(SubtaskStatus::ToolError),
            text: run.text.clone(),
            tool_call_count: run.tool_call_count,
            tool_turns: run.tool_turns,
            events: run.events(),
            tokens_in: run.tokens_in,
            tokens_out: run.tokens_out,
            local_trace_path,
        }
    }
}
