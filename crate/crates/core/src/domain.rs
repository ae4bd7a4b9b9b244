//! Domain types shared by every tier, and the host-context algebra.
//!
//! The host reasons over nothing but a [`HostContext`]: the original query
//! followed by `(directive, summary)` exchanges. Subtasks, tool calls and
//! worker output never enter it.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Errors raised by the context algebra and host-action validation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("text must not be empty")]
    EmptyText,
    #[error("directive index gap: expected {expected}, got {got}")]
    IndexGap { expected: u32, got: u32 },
    #[error("malformed host action: {0}")]
    MalformedAction(String),
    #[error("unknown manager `{0}`")]
    UnknownManager(String),
}

/// NFC-normalized copy of `text`. Stored texts keep their original bytes;
/// comparisons go through this.
pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Unicode-aware equality used for directive, summary and subtask texts.
pub fn text_eq(a: &str, b: &str) -> bool {
    a == b || nfc(a) == nfc(b)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ManagerId(String);

impl ManagerId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ManagerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub name: String,
    pub uri: String,
}

/// The user's task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub text: String,
    pub task_id: TaskId,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
}

impl TaskQuery {
    pub fn new(task_id: TaskId, text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyText);
        }
        Ok(Self {
            text,
            task_id,
            attachments: Vec::new(),
        })
    }
}

/// One host step, indexed from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDirective {
    pub text: String,
    pub index: u32,
}

impl StepDirective {
    pub fn new(index: u32, text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyText);
        }
        Ok(Self { text, index })
    }
}

/// What a manager hands back to the host for one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSummary {
    pub text: String,
    pub source_manager: ManagerId,
    pub subtask_count: usize,
    #[serde(default)]
    pub escalation_flags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub directive: StepDirective,
    pub summary: StepSummary,
}

/// Append-only record of the query and every completed step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostContext {
    query: TaskQuery,
    exchanges: Vec<Exchange>,
}

impl HostContext {
    pub fn new(query: TaskQuery) -> Self {
        Self {
            query,
            exchanges: Vec::new(),
        }
    }

    pub fn query(&self) -> &TaskQuery {
        &self.query
    }

    pub fn exchanges(&self) -> &[Exchange] {
        &self.exchanges
    }

    /// Number of completed `(directive, summary)` pairs.
    pub fn entry_count(&self) -> usize {
        self.exchanges.len()
    }

    pub fn next_index(&self) -> u32 {
        self.exchanges.len() as u32 + 1
    }

    /// Consumes the context and returns it with one more exchange. The
    /// directive must carry the next step index.
    pub fn append_exchange(
        mut self,
        directive: StepDirective,
        summary: StepSummary,
    ) -> Result<Self, DomainError> {
        let expected = self.next_index();
        if directive.index != expected {
            return Err(DomainError::IndexGap {
                expected,
                got: directive.index,
            });
        }
        self.exchanges.push(Exchange { directive, summary });
        Ok(self)
    }

    /// Every text the host can see: the query, directives and summaries.
    pub fn visible_texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.query.text.as_str()).chain(
            self.exchanges
                .iter()
                .flat_map(|e| [e.directive.text.as_str(), e.summary.text.as_str()]),
        )
    }

    /// Rendering used by the host prompts.
    pub fn render_exchanges(&self) -> String {
        if self.exchanges.is_empty() {
            return "(no steps completed yet)".to_string();
        }
        let mut out = String::new();
        for (i, e) in self.exchanges.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!(
                "Step {} -> {}: {}\n",
                e.directive.index, e.summary.source_manager, e.directive.text
            ));
            if e.summary.escalation_flags.is_empty() {
                out.push_str("Result:\n");
            } else {
                let flags: Vec<&str> = e.summary.escalation_flags.iter().map(String::as_str).collect();
                out.push_str(&format!("Result [flags: {}]:\n", flags.join(", ")));
            }
            out.push_str(&e.summary.text);
            out.push('\n');
        }
        out
    }
}

/// Free function form of [`HostContext::entry_count`].
pub fn context_entry_count(ctx: &HostContext) -> usize {
    ctx.entry_count()
}

/// Free function form of [`HostContext::append_exchange`].
pub fn append_exchange(
    ctx: HostContext,
    directive: StepDirective,
    summary: StepSummary,
) -> Result<HostContext, DomainError> {
    ctx.append_exchange(directive, summary)
}

/// A validated host decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostAction {
    Step {
        directive: StepDirective,
        manager: ManagerId,
    },
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Step,
    Stop,
}

/// Wire form of a host completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionDocument {
    pub kind: ActionKind,
    #[serde(default)]
    pub directive: Option<String>,
    #[serde(default)]
    pub manager: Option<String>,
}

/// Parses a host completion into a [`HostAction`]. `next_index` becomes the
/// directive's step index; the manager must be present in `registry`.
pub fn validate_host_action<'a, I>(
    raw: &str,
    registry: I,
    next_index: u32,
) -> Result<HostAction, DomainError>
where
    I: IntoIterator<Item = &'a ManagerId>,
{
    let doc: ActionDocument =
        serde_json::from_str(raw.trim()).map_err(|e| DomainError::MalformedAction(e.to_string()))?;
    match doc.kind {
        ActionKind::Stop => Ok(HostAction::Stop),
        ActionKind::Step => {
            let text = doc
                .directive
                .filter(|d| !d.trim().is_empty())
                .ok_or_else(|| DomainError::MalformedAction("STEP requires a non-empty directive".into()))?;
            let manager = doc
                .manager
                .filter(|m| !m.trim().is_empty())
                .ok_or_else(|| DomainError::MalformedAction("STEP requires a manager".into()))?;
            if !registry.into_iter().any(|id| id.as_str() == manager) {
                return Err(DomainError::UnknownManager(manager));
            }
            Ok(HostAction::Step {
                directive: StepDirective::new(next_index, text)?,
                manager: ManagerId::new(manager),
            })
        }
    }
}

/// One unit of worker work, `q_t^k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub text: String,
    pub step_index: u32,
    pub slot: usize,
    pub revision: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SubtaskStatus {
    Ok,
    ToolError,
    Timeout,
}

impl SubtaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SubtaskStatus::Ok => "OK",
            SubtaskStatus::ToolError => "TOOL_ERROR",
            SubtaskStatus::Timeout => "TIMEOUT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskResult {
    pub subtask: Subtask,
    pub status: SubtaskStatus,
    pub text: String,
    pub tool_call_count: usize,
    /// Seconds, virtual or wall depending on the scheduler clock.
    pub duration: f64,
}

impl SubtaskResult {
    pub fn is_ok(&self) -> bool {
        self.status == SubtaskStatus::Ok && !self.text.trim().is_empty()
    }
}

/// Outcome of one reflection round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReflectionVerdict {
    Accept,
    /// Replacement subtasks, each for a slot judged deficient.
    Revise(Vec<Subtask>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    Stop,
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    pub steps_used: usize,
    pub terminated_by: Termination,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query() -> TaskQuery {
        TaskQuery::new(TaskId::new("t"), "find things").unwrap()
    }

    fn summary(text: &str) -> StepSummary {
        StepSummary {
            text: text.into(),
            source_manager: ManagerId::new("search"),
            subtask_count: 1,
            escalation_flags: BTreeSet::new(),
        }
    }

    fn ctx_with(n: u32) -> HostContext {
        (1..=n).fold(HostContext::new(query()), |ctx, i| {
            ctx.append_exchange(
                StepDirective::new(i, format!("step {i}")).unwrap(),
                summary(&format!("summary {i}")),
            )
            .unwrap()
        })
    }

    #[test]
    fn empty_query_rejected() {
        assert_eq!(
            TaskQuery::new(TaskId::new("t"), "  \n\t").unwrap_err(),
            DomainError::EmptyText
        );
    }

    #[test]
    fn append_to_fresh_context() {
        let ctx = HostContext::new(query());
        assert_eq!(context_entry_count(&ctx), 0);
        let ctx = append_exchange(ctx, StepDirective::new(1, "q1").unwrap(), summary("y1")).unwrap();
        assert_eq!(ctx.entry_count(), 1);
    }

    #[test]
    fn append_keeps_prefix() {
        let two = ctx_with(2);
        let before = serde_json::to_string(two.exchanges()).unwrap();
        let three = two
            .clone()
            .append_exchange(StepDirective::new(3, "q3").unwrap(), summary("y3"))
            .unwrap();
        assert_eq!(three.entry_count(), 3);
        assert_eq!(serde_json::to_string(&three.exchanges()[..2]).unwrap(), before);
    }

    #[test]
    fn only_next_index_is_accepted() {
        // Reference appender: accepts exactly len + 1.
        let reference = |len: u32, idx: u32| idx == len + 1;
        for idx in 1..=6 {
            let res = ctx_with(2).append_exchange(StepDirective::new(idx, "q").unwrap(), summary("y"));
            assert_eq!(res.is_ok(), reference(2, idx), "index {idx}");
            if idx == 5 {
                assert_eq!(res.unwrap_err(), DomainError::IndexGap { expected: 3, got: 5 });
            }
        }
    }

    #[test]
    fn entry_count_after_three_appends() {
        assert_eq!(context_entry_count(&ctx_with(3)), 3);
    }

    fn registry(ids: &[&str]) -> Vec<ManagerId> {
        ids.iter().map(|s| ManagerId::new(*s)).collect()
    }

    #[test]
    fn stop_action() {
        let reg = registry(&["search"]);
        assert_eq!(
            validate_host_action(r#"{"kind":"STOP"}"#, &reg, 1).unwrap(),
            HostAction::Stop
        );
    }

    #[test]
    fn step_action_names_registered_manager() {
        let reg = registry(&["search", "browser"]);
        let action = validate_host_action(
            r#"{"kind":"STEP","directive":"look it up","manager":"search"}"#,
            &reg,
            4,
        )
        .unwrap();
        match action {
            HostAction::Step { directive, manager } => {
                assert_eq!(manager.as_str(), "search");
                assert_eq!(directive.index, 4);
                assert_eq!(directive.text, "look it up");
            }
            HostAction::Stop => panic!("expected a step"),
        }
    }

    #[test]
    fn unknown_manager() {
        let reg = registry(&["search"]);
        assert_eq!(
            validate_host_action(r#"{"kind":"STEP","directive":"x","manager":"sql"}"#, &reg, 1)
                .unwrap_err(),
            DomainError::UnknownManager("sql".into())
        );
    }

    #[test]
    fn malformed_actions() {
        let reg = registry(&["search"]);
        for raw in [
            "STOP",
            r#"{"kind":"STOP"} trailing"#,
            r#"{"kind":"STEP","manager":"search"}"#,
            r#"{"kind":"STEP","directive":"  ","manager":"search"}"#,
            r#"{"kind":"MAYBE"}"#,
            r#"{"kind":"STOP","extra":1}"#,
            "",
        ] {
            assert!(
                matches!(validate_host_action(raw, &reg, 1), Err(DomainError::MalformedAction(_))),
                "{raw:?}"
            );
        }
    }

    #[test]
    fn nfc_comparison() {
        // "é" precomposed vs "e" + combining acute.
        assert!(text_eq("caf\u{e9}", "cafe\u{301}"));
        assert!(!text_eq("cafe", "caf\u{e9}"));
    }

    #[test]
    fn visible_texts_cover_query_and_exchanges() {
        let ctx = ctx_with(2);
        let texts: Vec<&str> = ctx.visible_texts().collect();
        assert_eq!(texts, vec!["find things", "step 1", "summary 1", "step 2", "summary 2"]);
    }

    #[test]
    fn rendering_shows_flags() {
        let mut s = summary("partial list");
        s.escalation_flags.insert("BROWSER_RECOMMENDED".into());
        let ctx = HostContext::new(query())
            .append_exchange(StepDirective::new(1, "search").unwrap(), s)
            .unwrap();
        let r = ctx.render_exchanges();
        assert!(r.contains("Step 1 -> search: search"));
        assert!(r.contains("[flags: BROWSER_RECOMMENDED]"));
    }
}
