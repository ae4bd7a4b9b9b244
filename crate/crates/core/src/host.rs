//! The host loop: plan a step, hand it to one manager, absorb the summary,
//! repeat until STOP or the step limit, then finalize.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backends::{BackendError, CompletionBackend, CompletionRequest, Role, Turn};
use crate::domain::{
    validate_host_action, DomainError, FinalAnswer, HostAction, HostContext, ManagerId, StepSummary, TaskQuery,
    Termination,
};
use crate::manager::{StepEnv, StepHandler};
use crate::telemetry::{Actor, EventKind, PendingEvent, TelemetryError, TraceHandle, Tracer};
use crate::templates::{Templates, HOST_FINALIZE, HOST_PLAN};

pub const DEFAULT_STEP_LIMIT: u32 = 12;
pub const DEFAULT_REPROMPT_LIMIT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostConfig {
    pub step_limit: u32,
    pub reprompt_limit: u32,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            step_limit: DEFAULT_STEP_LIMIT,
            reprompt_limit: DEFAULT_REPROMPT_LIMIT,
        }
    }
}

#[derive(Debug, Error)]
pub enum HostError {
    #[error("planning failed: {0}")]
    PlanningFailed(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("manager failure: {0}")]
    Manager(String),
    #[error("no managers registered")]
    EmptyRegistry,
    #[error("manager `{0}` registered twice")]
    DuplicateManager(String),
}

impl HostError {
    pub fn code(&self) -> &'static str {
        match self {
            HostError::PlanningFailed(_) => "PlanningFailed",
            HostError::Backend(e) => e.code(),
            HostError::Domain(_) => "DomainError",
            HostError::Telemetry(_) => "SinkUnavailable",
            HostError::Manager(_) => "ManagerFailed",
            HostError::EmptyRegistry => "EmptyRegistry",
            HostError::DuplicateManager(_) => "DuplicateManager",
        }
    }
}

/// Managers by id, each with the capability line the host is shown.
#[derive(Clone, Default)]
pub struct ManagerRegistry {
    entries: BTreeMap<ManagerId, Arc<dyn StepHandler>>,
}

impl ManagerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, handler: Arc<dyn StepHandler>) -> Result<(), HostError> {
        let id = handler.id().clone();
        if self.entries.contains_key(&id) {
            return Err(HostError::DuplicateManager(id.to_string()));
        }
        self.entries.insert(id, handler);
        Ok(())
    }

    pub fn remove(&mut self, id: &ManagerId) -> Option<Arc<dyn StepHandler>> {
        self.entries.remove(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ManagerId> {
        self.entries.keys()
    }

    pub fn get(&self, id: &ManagerId) -> Option<&Arc<dyn StepHandler>> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `- id: capability` line per manager, sorted by id.
    pub fn capability_lines(&self) -> String {
        self.entries
            .iter()
            .map(|(id, h)| format!("- {id}: {}", h.capability()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A validated plan plus what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub action: HostAction,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Rejected completions preceding the accepted one, with the reason.
    pub rejected: Vec<String>,
}

#[derive(Debug)]
pub struct TaskRun {
    pub answer: FinalAnswer,
    pub context: HostContext,
    pub trace: TraceHandle,
}

#[derive(Debug, Error)]
#[error("task failed: {cause}")]
pub struct TaskFailed {
    pub cause: HostError,
    /// Everything recorded up to the failure.
    pub trace: TraceHandle,
}

pub struct Host {
    cfg: HostConfig,
    backend: Arc<dyn CompletionBackend>,
    templates: Arc<Templates>,
}

impl Host {
    pub fn new(cfg: HostConfig, backend: Arc<dyn CompletionBackend>, templates: Arc<Templates>) -> Self {
        assert!(cfg.step_limit >= 1, "step_limit must be at least 1");
        Self { cfg, backend, templates }
    }

    pub fn config(&self) -> &HostConfig {
        &self.cfg
    }

    /// Asks the backend for the next action, re-prompting up to
    /// `reprompt_limit` times on an unusable reply.
    pub async fn plan_next(&self, ctx: &HostContext, registry: &ManagerRegistry) -> Result<Plan, HostError> {
        let t = ctx.next_index();
        let prompt = self.templates.render(
            HOST_PLAN,
            &[
                ("query", &ctx.query().text),
                ("exchanges", &ctx.render_exchanges()),
                ("managers", &registry.capability_lines()),
                ("step", &t.to_string()),
                ("step_limit", &self.cfg.step_limit.to_string()),
            ],
        );
        let routes = vec![format!("host:plan:{t}"), "host:plan".to_string()];
        let mut transcript = vec![Turn::new("user", prompt)];
        let mut plan = Plan {
            action: HostAction::Stop,
            tokens_in: 0,
            tokens_out: 0,
            rejected: Vec::new(),
        };
        for attempt in 0..=self.cfg.reprompt_limit {
            let req = CompletionRequest::new(Role::Host, "", transcript.clone()).with_routes(routes.clone());
            let c = self.backend.complete(&req).await?;
            plan.tokens_in += c.prompt_tokens;
            plan.tokens_out += c.completion_tokens;
            match validate_host_action(&c.text, registry.ids(), t) {
                Ok(action) => {
                    plan.action = action;
                    return Ok(plan);
                }
                Err(e) => {
                    plan.rejected.push(e.to_string());
                    if attempt == self.cfg.reprompt_limit {
                        break;
                    }
                    transcript.push(Turn::new("assistant", c.text));
                    transcript.push(Turn::new(
                        "user",
                        format!("That reply could not be used ({e}). Reply with only one JSON action object."),
                    ));
                }
            }
        }
        Err(HostError::PlanningFailed(plan.rejected.join("; ")))
    }

    /// Final answer over the full context.
    pub async fn finalize(&self, ctx: &HostContext, terminated_by: Termination) -> Result<(FinalAnswer, u64, u64), HostError> {
        let prompt = self.templates.render(
            HOST_FINALIZE,
            &[("query", &ctx.query().text), ("exchanges", &ctx.render_exchanges())],
        );
        let req = CompletionRequest::new(Role::Host, "", vec![Turn::new("user", prompt)]).with_routes(["host:finalize"]);
        let c = self.backend.complete(&req).await?;
        Ok((
            FinalAnswer {
                text: c.text,
                steps_used: ctx.entry_count(),
                terminated_by,
            },
            c.prompt_tokens,
            c.completion_tokens,
        ))
    }

    pub async fn run_task(&self, query: TaskQuery, registry: &ManagerRegistry, tracer: &Tracer) -> Result<TaskRun, TaskFailed> {
        match self.run_inner(query, registry, tracer).await {
            Ok((answer, context)) => Ok(TaskRun {
                answer,
                context,
                trace: tracer.handle(),
            }),
            Err(cause) => {
                // Best effort: the sink itself may be what failed.
                let _ = tracer.emit(PendingEvent::new(
                    Actor::Host,
                    EventKind::Error,
                    None,
                    json!({"fatal": true, "code": cause.code(), "message": cause.to_string()}),
                ));
                Err(TaskFailed {
                    cause,
                    trace: tracer.handle(),
                })
            }
        }
    }

    async fn run_inner(
        &self,
        query: TaskQuery,
        registry: &ManagerRegistry,
        tracer: &Tracer,
    ) -> Result<(FinalAnswer, HostContext), HostError> {
        if registry.is_empty() {
            return Err(HostError::EmptyRegistry);
        }
        let env = StepEnv {
            task_id: query.task_id.clone(),
            tracer: tracer.clone(),
        };
        let host_event = |kind, step, payload| PendingEvent::new(Actor::Host, kind, step, payload);
        let mut ctx = HostContext::new(query);
        let mut terminated_by = Termination::StepLimit;

        while ctx.entry_count() < self.cfg.step_limit as usize {
            let t = ctx.next_index();
            let plan = self.plan_next(&ctx, registry).await?;
            for (i, why) in plan.rejected.iter().enumerate() {
                tracer.emit(host_event(
                    EventKind::Warning,
                    Some(t),
                    json!({"reason": "host action rejected, re-prompting", "attempt": i + 1, "detail": why}),
                ))?;
            }
            let (directive, manager) = match plan.action {
                HostAction::Stop => {
                    tracer.emit(
                        host_event(EventKind::Stop, None, json!({"after_steps": ctx.entry_count()}))
                            .with_tokens(plan.tokens_in, plan.tokens_out),
                    )?;
                    terminated_by = Termination::Stop;
                    break;
                }
                HostAction::Step { directive, manager } => (directive, manager),
            };
            tracer.emit(
                host_event(
                    EventKind::Step,
                    Some(t),
                    json!({"directive": directive.text, "manager": manager.as_str()}),
                )
                .with_tokens(plan.tokens_in, plan.tokens_out),
            )?;
            let handler = registry.get(&manager).expect("validated against the registry");
            let summary = match handler.handle_step(&directive, &env).await {
                Ok(s) => s,
                Err(e) if e.is_fatal() => return Err(HostError::Manager(e.to_string())),
                Err(e) => {
                    let note = e.host_note();
                    tracer.emit(host_event(
                        EventKind::Warning,
                        Some(t),
                        json!({"reason": "step failed", "manager": manager.as_str(), "summary": note}),
                    ))?;
                    StepSummary {
                        text: note,
                        source_manager: manager.clone(),
                        subtask_count: 0,
                        escalation_flags: Default::default(),
                    }
                }
            };
            ctx = ctx.append_exchange(directive, summary)?;
        }

        let (answer, tin, tout) = self.finalize(&ctx, terminated_by).await?;
        tracer.emit(
            host_event(
                EventKind::Finalize,
                None,
                json!({
                    "answer": answer.text,
                    "steps_used": answer.steps_used,
                    "step_limit": self.cfg.step_limit,
                    "terminated_by": match answer.terminated_by {
                        Termination::Stop => "STOP",
                        Termination::StepLimit => "STEP_LIMIT",
                    },
                }),
            )
            .with_tokens(tin, tout),
        )?;
        Ok((answer, ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ScriptTable, ScriptedBackend};
    use crate::manager::ManagerError;
    use crate::domain::{StepDirective, TaskId};
    use crate::telemetry::{verify, Clock};
    use async_trait::async_trait;
    use std::collections::BTreeSet;

    /// Manager double that answers every directive with a fixed summary.
    struct Echo {
        id: ManagerId,
        flags: Vec<String>,
        fail: bool,
    }

    #[async_trait]
    impl StepHandler for Echo {
        fn id(&self) -> &ManagerId {
            &self.id
        }

        fn capability(&self) -> &str {
            "answers anything"
        }

        async fn handle_step(&self, d: &StepDirective, env: &StepEnv) -> Result<StepSummary, ManagerError> {
            let t = d.index;
            let m = self.id.as_str();
            let emit = |kind, payload| {
                env.tracer
                    .emit(PendingEvent::new(Actor::Manager, kind, Some(t), payload))
                    .map(|_| ())
            };
            emit(EventKind::Decompose, json!({"manager": m, "count": 1, "reflect_limit": 3}))?;
            emit(EventKind::Execute, json!({"slot": 0, "status": "OK"}))?;
            emit(EventKind::Reflect, json!({"status": "ACCEPT", "replacements": 0}))?;
            if self.fail {
                emit(EventKind::Aggregate, json!({"failed": true, "summary": "nothing worked"}))?;
                return Err(ManagerError::StepFailed("nothing worked".into()));
            }
            let text = format!("{m} did: {}", d.text);
            emit(EventKind::Aggregate, json!({"summary": text}))?;
            Ok(StepSummary {
                text,
                source_manager: self.id.clone(),
                subtask_count: 1,
                escalation_flags: self.flags.iter().cloned().collect::<BTreeSet<_>>(),
            })
        }
    }

    fn registry(ids: &[&str]) -> ManagerRegistry {
        let mut r = ManagerRegistry::new();
        for id in ids {
            r.register(Arc::new(Echo {
                id: ManagerId::new(*id),
                flags: vec![],
                fail: false,
            }))
            .unwrap();
        }
        r
    }

    fn host(script: &[(&str, &str)], cfg: HostConfig) -> (Host, Arc<ScriptedBackend>) {
        let mut t = ScriptTable::new();
        for (k, v) in script {
            t.push(*k, *v);
        }
        let backend = Arc::new(ScriptedBackend::new(t));
        (Host::new(cfg, backend.clone(), Arc::new(Templates::default())), backend)
    }

    fn query() -> TaskQuery {
        TaskQuery::new(TaskId::new("t1"), "Which restaurants hold three stars?").unwrap()
    }

    const STEP_SEARCH: &str = r#"{"kind":"STEP","directive":"find them","manager":"search"}"#;

    #[tokio::test]
    async fn plan_step_for_search() {
        let (h, _) = host(&[("host:plan:1", STEP_SEARCH)], HostConfig::default());
        let plan = h.plan_next(&HostContext::new(query()), &registry(&["search", "browser"])).await.unwrap();
        match plan.action {
            HostAction::Step { directive, manager } => {
                assert_eq!(directive.index, 1);
                assert_eq!(manager.as_str(), "search");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn malformed_twice_fails_planning() {
        let (h, _) = host(&[("host:plan", "I think we should search"), ("host:plan", "still prose")], HostConfig::default());
        let err = h.plan_next(&HostContext::new(query()), &registry(&["search"])).await.unwrap_err();
        assert!(matches!(err, HostError::PlanningFailed(_)));
    }

    #[tokio::test]
    async fn reprompt_recovers_once() {
        let (h, backend) = host(&[("host:plan", "prose"), ("host:plan", STEP_SEARCH)], HostConfig::default());
        let plan = h.plan_next(&HostContext::new(query()), &registry(&["search"])).await.unwrap();
        assert_eq!(plan.rejected.len(), 1);
        let reqs = backend.requests();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[1].transcript.len(), 3);
    }

    #[tokio::test]
    async fn unknown_manager_reprompts_then_fails() {
        let sql = r#"{"kind":"STEP","directive":"query","manager":"sql"}"#;
        let (h, _) = host(&[("host:plan", sql), ("host:plan", sql)], HostConfig::default());
        let err = h.plan_next(&HostContext::new(query()), &registry(&["search"])).await.unwrap_err();
        assert!(err.to_string().contains("unknown manager"));
    }

    #[tokio::test]
    async fn two_steps_then_stop() {
        let (h, _) = host(
            &[
                ("host:plan:1", STEP_SEARCH),
                ("host:plan:2", r#"{"kind":"STEP","directive":"check details","manager":"search"}"#),
                ("host:plan:3", r#"{"kind":"STOP"}"#),
                ("host:finalize", "| a | b |"),
            ],
            HostConfig::default(),
        );
        let tracer = Tracer::in_memory(Clock::virtual_at_zero());
        let run = h.run_task(query(), &registry(&["search"]), &tracer).await.unwrap();
        assert_eq!(run.answer.steps_used, 2);
        assert_eq!(run.answer.terminated_by, Termination::Stop);
        assert_eq!(run.answer.text, "| a | b |");
        let kinds: Vec<EventKind> = run.trace.events.iter().filter(|e| e.actor == Actor::Host).map(|e| e.kind).collect();
        assert_eq!(kinds, [EventKind::Step, EventKind::Step, EventKind::Stop, EventKind::Finalize]);
        assert!(verify(&run.trace.events).unwrap().passed());
    }

    #[tokio::test]
    async fn immediate_stop() {
        let (h, _) = host(&[("host:plan", r#"{"kind":"STOP"}"#), ("host:finalize", "nothing needed")], HostConfig::default());
        let tracer = Tracer::in_memory(Clock::virtual_at_zero());
        let run = h.run_task(query(), &registry(&["search"]), &tracer).await.unwrap();
        assert_eq!(run.answer.steps_used, 0);
        assert_eq!(run.context.entry_count(), 0);
    }

    #[tokio::test]
    async fn step_limit_still_finalizes() {
        let (h, _) = host(
            &[("host:plan", STEP_SEARCH), ("host:finalize", "best effort")],
            HostConfig {
                step_limit: 1,
                reprompt_limit: 1,
            },
        );
        let tracer = Tracer::in_memory(Clock::virtual_at_zero());
        let run = h.run_task(query(), &registry(&["search"]), &tracer).await.unwrap();
        assert_eq!(run.answer.steps_used, 1);
        assert_eq!(run.answer.terminated_by, Termination::StepLimit);
    }

    #[tokio::test]
    async fn flagged_summary_routes_to_browser() {
        let mut reg = ManagerRegistry::new();
        reg.register(Arc::new(Echo {
            id: ManagerId::new("search"),
            flags: vec!["BROWSER_RECOMMENDED".into()],
            fail: false,
        }))
        .unwrap();
        reg.register(Arc::new(Echo {
            id: ManagerId::new("browser"),
            flags: vec![],
            fail: false,
        }))
        .unwrap();
        let (h, backend) = host(
            &[
                ("host:plan:1", STEP_SEARCH),
                ("host:plan:2", r#"{"kind":"STEP","directive":"open the pages","manager":"browser"}"#),
                ("host:plan:3", r#"{"kind":"STOP"}"#),
                ("host:finalize", "done"),
            ],
            HostConfig::default(),
        );
        let tracer = Tracer::in_memory(Clock::virtual_at_zero());
        let run = h.run_task(query(), &reg, &tracer).await.unwrap();
        assert_eq!(run.context.exchanges()[1].summary.source_manager.as_str(), "browser");
        let second_plan = &backend.requests()[1].transcript[0].text;
        assert!(second_plan.contains("[flags: BROWSER_RECOMMENDED]"));
    }

    #[tokio::test]
    async fn failed_step_is_absorbed() {
        let mut reg = ManagerRegistry::new();
        reg.register(Arc::new(Echo {
            id: ManagerId::new("search"),
            flags: vec![],
            fail: true,
        }))
        .unwrap();
        let (h, _) = host(
            &[("host:plan:1", STEP_SEARCH), ("host:plan:2", r#"{"kind":"STOP"}"#), ("host:finalize", "partial")],
            HostConfig::default(),
        );
        let tracer = Tracer::in_memory(Clock::virtual_at_zero());
        let run = h.run_task(query(), &reg, &tracer).await.unwrap();
        assert_eq!(run.context.exchanges()[0].summary.text, "nothing worked");
        let warn = run
            .trace
            .events
            .iter()
            .find(|e| e.actor == Actor::Host && e.kind == EventKind::Warning)
            .unwrap();
        assert_eq!(warn.payload["summary"], "nothing worked");
    }

    #[tokio::test]
    async fn planning_failure_keeps_partial_trace() {
        let (h, _) = host(&[("host:plan:1", STEP_SEARCH), ("host:plan:2", "x"), ("host:plan:2", "y")], HostConfig::default());
        let tracer = Tracer::in_memory(Clock::virtual_at_zero());
        let failed = h.run_task(query(), &registry(&["search"]), &tracer).await.unwrap_err();
        assert!(matches!(failed.cause, HostError::PlanningFailed(_)));
        let last = failed.trace.events.last().unwrap();
        assert_eq!(last.kind, EventKind::Error);
        assert_eq!(last.payload["fatal"], true);
        assert!(failed.trace.events.iter().any(|e| e.kind == EventKind::Step));
    }

    #[tokio::test]
    async fn empty_registry_fails() {
        let (h, _) = host(&[], HostConfig::default());
        let tracer = Tracer::in_memory(Clock::virtual_at_zero());
        let failed = h.run_task(query(), &ManagerRegistry::new(), &tracer).await.unwrap_err();
        assert!(matches!(failed.cause, HostError::EmptyRegistry));
    }

    #[test]
    fn capability_lines_sorted() {
        assert_eq!(
            registry(&["search", "browser"]).capability_lines(),
            "- browser: answers anything\n- search: answers anything"
        );
    }
}
