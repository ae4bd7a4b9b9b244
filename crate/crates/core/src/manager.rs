//! Manager tier: decompose a directive, run waves of subtasks, reflect,
//! aggregate into one [`StepSummary`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backends::{Completion, CompletionBackend, CompletionRequest, Role, Turn};
use crate::domain::{nfc, ManagerId, ReflectionVerdict, StepDirective, StepSummary, Subtask, SubtaskResult, TaskId};
use crate::mcp::McpClient;
use crate::scheduler::{ClockMode, Scheduler, WaveOutcome};
use crate::telemetry::{Actor, EventKind, PendingEvent, TelemetryError, Tracer};
use crate::templates::{Templates, MANAGER_AGGREGATE, MANAGER_DECOMPOSE, MANAGER_REFLECT};
use crate::worker::{Worker, WorkerConfig};

pub const DEFAULT_DECOMPOSE_CAP: usize = 17;
pub const DEFAULT_REFLECT_LIMIT: u32 = 3;
pub const BROWSER_RECOMMENDED: &str = "[BROWSER_RECOMMENDED]";
/// Added to a summary when reflection was cut off while still asking for revisions.
pub const REFLECT_LIMIT_REACHED: &str = "[REFLECT_LIMIT_REACHED]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerConfig {
    pub id: ManagerId,
    pub domain: String,
    /// One line shown to the host describing what this manager is for.
    pub capability: String,
    pub decompose_cap: usize,
    pub reflect_limit: u32,
    /// Exact substrings scanned in results; `[NAME]` yields flag `NAME`.
    pub escalation_markers: Vec<String>,
}

impl ManagerConfig {
    pub fn new(id: &str, domain: &str, capability: &str) -> Self {
        Self {
            id: ManagerId::new(id),
            domain: domain.into(),
            capability: capability.into(),
            decompose_cap: DEFAULT_DECOMPOSE_CAP,
            reflect_limit: DEFAULT_REFLECT_LIMIT,
            escalation_markers: vec![BROWSER_RECOMMENDED.into()],
        }
    }
}

pub fn flag_name(marker: &str) -> String {
    marker.trim_start_matches('[').trim_end_matches(']').to_string()
}

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("decomposition failed: {0}")]
    DecompositionFailed(String),
    #[error("step failed: {0}")]
    StepFailed(String),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

impl ManagerError {
    /// Text handed to the host in place of a summary.
    pub fn host_note(&self) -> String {
        match self {
            ManagerError::DecompositionFailed(_) => "The step could not be started: the directive was not split into subtasks.".into(),
            ManagerError::StepFailed(note) => note.clone(),
            ManagerError::Telemetry(e) => e.to_string(),
        }
    }

    pub fn is_fatal(&self) -> bool {
        matches!(self, ManagerError::Telemetry(_))
    }
}

/// Per-call environment the host hands to a manager.
#[derive(Clone)]
pub struct StepEnv {
    pub task_id: TaskId,
    pub tracer: Tracer,
}

/// The only surface the host sees of a manager.
#[async_trait]
pub trait StepHandler: Send + Sync {
    fn id(&self) -> &ManagerId;

    fn capability(&self) -> &str;

    async fn handle_step(&self, directive: &StepDirective, env: &StepEnv) -> Result<StepSummary, ManagerError>;
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecomposeDoc {
    subtasks: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReflectDoc {
    status: String,
    #[serde(default)]
    replacements: Vec<Replacement>,
    #[serde(default)]
    rationale: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Replacement {
    slot: usize,
    text: String,
}

/// Trimmed, non-empty texts with NFC duplicates removed, first occurrence kept.
pub fn dedup_subtasks(texts: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    texts
        .into_iter()
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .filter(|t| seen.insert(nfc(t)))
        .collect()
}

fn parse_decomposition(raw: &str) -> Result<Vec<String>, String> {
    let doc: DecomposeDoc = serde_json::from_str(raw.trim()).map_err(|e| e.to_string())?;
    let texts = dedup_subtasks(doc.subtasks);
    if texts.is_empty() {
        return Err("no subtasks".into());
    }
    Ok(texts)
}

/// Reflection outcome after bounds are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionRecord {
    pub round: u32,
    pub verdict: ReflectionVerdict,
    pub rationale: String,
    pub forced_accept: bool,
    pub parse_failed: bool,
}

/// Interprets a reflect completion for `round`. `revisions` maps each slot to
/// its current revision; replacements for other slots are dropped.
pub fn interpret_reflection(
    raw: &str,
    step_index: u32,
    revisions: &BTreeMap<usize, u32>,
    round: u32,
    reflect_limit: u32,
) -> ReflectionRecord {
    let doc: ReflectDoc = match serde_json::from_str(raw.trim()) {
        Ok(d) => d,
        Err(e) => {
            return ReflectionRecord {
                round,
                verdict: ReflectionVerdict::Accept,
                rationale: format!("unparseable review, accepted: {e}"),
                forced_accept: false,
                parse_failed: true,
            }
        }
    };
    let accept = |rationale: String, forced: bool, parse_failed: bool| ReflectionRecord {
        round,
        verdict: ReflectionVerdict::Accept,
        rationale,
        forced_accept: forced,
        parse_failed,
    };
    match doc.status.trim().to_ascii_uppercase().as_str() {
        "ACCEPT" => accept(doc.rationale, false, false),
        "REVISE" => {
            let mut seen = BTreeSet::new();
            let replacements: Vec<Subtask> = doc
                .replacements
                .into_iter()
                .filter(|r| !r.text.trim().is_empty())
                .filter_map(|r| {
                    let rev = *revisions.get(&r.slot)?;
                    seen.insert(r.slot).then(|| Subtask {
                        text: r.text.trim().to_string(),
                        step_index,
                        slot: r.slot,
                        revision: rev + 1,
                    })
                })
                .collect();
            if replacements.is_empty() {
                accept(doc.rationale, false, false)
            } else if round >= reflect_limit {
                accept(doc.rationale, true, false)
            } else {
                ReflectionRecord {
                    round,
                    verdict: ReflectionVerdict::Revise(replacements),
                    rationale: doc.rationale,
                    forced_accept: false,
                    parse_failed: false,
                }
            }
        }
        other => accept(format!("unknown review status `{other}`, accepted"), false, true),
    }
}

fn render_results(results: &[&SubtaskResult]) -> String {
    if results.is_empty() {
        return "(none)".into();
    }
    results
        .iter()
        .map(|r| {
            format!(
                "[slot {}] {} ({} tool calls)\n{}",
                r.subtask.slot,
                r.status.as_str(),
                r.tool_call_count,
                r.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_failures(results: &[&SubtaskResult]) -> String {
    if results.is_empty() {
        return "(none)".into();
    }
    results
        .iter()
        .map(|r| format!("- slot {}: {}", r.subtask.slot, r.status.as_str()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct Manager {
    cfg: ManagerConfig,
    backend: Arc<dyn CompletionBackend>,
    worker_backend: Arc<dyn CompletionBackend>,
    tools: Arc<McpClient>,
    scheduler: Arc<Scheduler>,
    worker_cfg: WorkerConfig,
    templates: Arc<Templates>,
}

struct Asked {
    completion: Option<Completion>,
    error: Option<String>,
    tokens_in: u64,
    tokens_out: u64,
}

impl Manager {
    pub fn new(
        cfg: ManagerConfig,
        backend: Arc<dyn CompletionBackend>,
        worker_backend: Arc<dyn CompletionBackend>,
        tools: Arc<McpClient>,
        scheduler: Arc<Scheduler>,
        worker_cfg: WorkerConfig,
        templates: Arc<Templates>,
    ) -> Self {
        assert!(cfg.decompose_cap >= 1, "decompose_cap must be at least 1");
        assert!(cfg.reflect_limit >= 1, "reflect_limit must be at least 1");
        Self {
            cfg,
            backend,
            worker_backend,
            tools,
            scheduler,
            worker_cfg,
            templates,
        }
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.cfg
    }

    fn name(&self) -> &str {
        self.cfg.id.as_str()
    }

    async fn ask(&self, prompt: String, routes: Vec<String>) -> Asked {
        let req = CompletionRequest::new(Role::Manager, "", vec![Turn::new("user", prompt)]).with_routes(routes);
        match self.backend.complete(&req).await {
            Ok(c) => Asked {
                tokens_in: c.prompt_tokens,
                tokens_out: c.completion_tokens,
                completion: Some(c),
                error: None,
            },
            Err(e) => Asked {
                completion: None,
                error: Some(e.to_string()),
                tokens_in: 0,
                tokens_out: 0,
            },
        }
    }

    fn emit(&self, env: &StepEnv, kind: EventKind, step: u32, payload: Value, tokens: (u64, u64)) -> Result<(), TelemetryError> {
        env.tracer
            .emit(PendingEvent::new(Actor::Manager, kind, Some(step), payload).with_tokens(tokens.0, tokens.1))?;
        Ok(())
    }

    /// Decomposition with one re-prompt; returns texts already deduplicated
    /// and capped, plus token use and the uncapped count.
    async fn decompose(&self, d: &StepDirective) -> (Result<Vec<String>, String>, (u64, u64), usize) {
        let m = self.name();
        let routes = vec![format!("{m}:decompose:{}", d.index), format!("{m}:decompose")];
        let cap = self.cfg.decompose_cap.to_string();
        let prompt = self.templates.render(
            MANAGER_DECOMPOSE,
            &[("manager", m), ("domain", &self.cfg.domain), ("directive", &d.text), ("cap", &cap)],
        );
        let mut tokens = (0, 0);
        let mut last_err = String::new();
        let mut transcript = vec![Turn::new("user", prompt)];
        for _ in 0..2 {
            let req = CompletionRequest::new(Role::Manager, "", transcript.clone()).with_routes(routes.clone());
            let c = match self.backend.complete(&req).await {
                Ok(c) => c,
                Err(e) => return (Err(e.to_string()), tokens, 0),
            };
            tokens.0 += c.prompt_tokens;
            tokens.1 += c.completion_tokens;
            match parse_decomposition(&c.text) {
                Ok(mut texts) => {
                    let requested = texts.len();
                    texts.truncate(self.cfg.decompose_cap);
                    return (Ok(texts), tokens, requested);
                }
                Err(e) => {
                    last_err = e.clone();
                    transcript.push(Turn::new("assistant", c.text));
                    transcript.push(Turn::new(
                        "user",
                        format!("That was not a valid subtask list ({e}). Reply with only {{\"subtasks\": [...]}}."),
                    ));
                }
            }
        }
        (Err(last_err), tokens, 0)
    }

    fn flush_wave(&self, env: &StepEnv, step: u32, wave: u32, wave_start: f64, out: &WaveOutcome) -> Result<(), TelemetryError> {
        let virtual_clock = self.scheduler.config().clock == ClockMode::Virtual;
        for i in out.completion_order() {
            let e = &out.executions[i];
            let at = wave_start + e.finish;
            let emit = |p: PendingEvent| {
                if virtual_clock {
                    env.tracer.emit_at(p, at)
                } else {
                    env.tracer.emit(p)
                }
            };
            for evt in &e.events {
                emit(evt.clone())?;
            }
            let st = &e.result.subtask;
            let mut payload = json!({
                "manager": self.name(),
                "slot": st.slot,
                "revision": st.revision,
                "wave": wave,
                "subtask": st.text,
                "status": e.result.status.as_str(),
                "start": wave_start + e.start,
                "finish": wave_start + e.finish,
                "duration": e.result.duration,
                "tool_call_count": e.result.tool_call_count,
                "tool_turns": e.tool_turns,
                "max_tool_turns": self.worker_cfg.max_tool_turns,
            });
            if let Some(p) = &e.local_trace_path {
                payload["trace_path"] = json!(p);
            }
            emit(PendingEvent::new(Actor::Worker, EventKind::Execute, Some(step), payload).with_tokens(e.tokens_in, e.tokens_out))?;
        }
        Ok(())
    }

    fn escalation_flags(&self, texts: &[&str]) -> BTreeSet<String> {
        self.cfg
            .escalation_markers
            .iter()
            .filter(|m| texts.iter().any(|t| t.contains(m.as_str())))
            .map(|m| flag_name(m))
            .collect()
    }
}

#[async_trait]
impl StepHandler for Manager {
    fn id(&self) -> &ManagerId {
        &self.cfg.id
    }

    fn capability(&self) -> &str {
        &self.cfg.capability
    }

    async fn handle_step(&self, d: &StepDirective, env: &StepEnv) -> Result<StepSummary, ManagerError> {
        let m = self.name().to_string();
        let step = d.index;

        // Map phase setup.
        let (decomposed, tokens, requested) = self.decompose(d).await;
        let texts = match decomposed {
            Ok(t) => t,
            Err(why) => {
                self.emit(
                    env,
                    EventKind::Decompose,
                    step,
                    json!({"manager": m, "count": 0, "failed": true, "error": why, "reflect_limit": self.cfg.reflect_limit}),
                    tokens,
                )?;
                let err = ManagerError::DecompositionFailed(why);
                self.emit(
                    env,
                    EventKind::Aggregate,
                    step,
                    json!({"manager": m, "failed": true, "summary": err.host_note(), "subtask_count": 0, "step_makespan": 0.0}),
                    (0, 0),
                )?;
                return Err(err);
            }
        };
        self.emit(
            env,
            EventKind::Decompose,
            step,
            json!({
                "manager": m,
                "count": texts.len(),
                "subtasks": texts,
                "decompose_cap": self.cfg.decompose_cap,
                "reflect_limit": self.cfg.reflect_limit,
                "budget": self.scheduler.budget(),
            }),
            tokens,
        )?;
        if requested > texts.len() {
            self.emit(
                env,
                EventKind::Warning,
                step,
                json!({"manager": m, "reason": "decompose cap applied", "requested": requested, "kept": texts.len()}),
                (0, 0),
            )?;
        }

        let worker: Arc<Worker> = Arc::new(Worker::new(
            self.worker_cfg.clone(),
            m.clone(),
            env.task_id.clone(),
            self.worker_backend.clone(),
            self.tools.clone(),
            self.templates.clone(),
        ));
        let mut batch: Vec<Subtask> = texts
            .iter()
            .enumerate()
            .map(|(slot, text)| Subtask {
                text: text.clone(),
                step_index: step,
                slot,
                revision: 0,
            })
            .collect();
        let mut current: BTreeMap<usize, SubtaskResult> = BTreeMap::new();
        let mut step_makespan = 0.0;
        let mut forced = false;
        let mut waves = Vec::new();

        for round in 1..=self.cfg.reflect_limit {
            let wave_start = env.tracer.clock().now();
            let out = self.scheduler.execute_wave(&batch, worker.clone(), wave_start).await;
            self.flush_wave(env, step, round, wave_start, &out)?;
            env.tracer.clock().advance_to(wave_start + out.makespan);
            step_makespan += out.makespan;
            waves.push(batch.len());
            for r in out.results() {
                current.insert(r.subtask.slot, r);
            }

            let pairs: Vec<&SubtaskResult> = current.values().collect();
            let revisions: BTreeMap<usize, u32> = current.iter().map(|(k, r)| (*k, r.subtask.revision)).collect();
            let round_s = round.to_string();
            let limit_s = self.cfg.reflect_limit.to_string();
            let results = render_results(&pairs);
            let prompt = self.templates.render(
                MANAGER_REFLECT,
                &[
                    ("manager", &m),
                    ("directive", &d.text),
                    ("results", &results),
                    ("round", &round_s),
                    ("reflect_limit", &limit_s),
                ],
            );
            let asked = self
                .ask(
                    prompt,
                    vec![format!("{m}:reflect:{step}:{round}"), format!("{m}:reflect:{step}"), format!("{m}:reflect")],
                )
                .await;
            let record = match (&asked.completion, &asked.error) {
                (Some(c), _) => interpret_reflection(&c.text, step, &revisions, round, self.cfg.reflect_limit),
                (None, err) => ReflectionRecord {
                    round,
                    verdict: ReflectionVerdict::Accept,
                    rationale: format!("review unavailable, accepted: {}", err.clone().unwrap_or_default()),
                    forced_accept: false,
                    parse_failed: true,
                },
            };
            if record.parse_failed {
                self.emit(
                    env,
                    EventKind::Warning,
                    step,
                    json!({"manager": m, "reason": "reflection defaulted to ACCEPT", "round": round, "detail": record.rationale}),
                    (0, 0),
                )?;
            }
            let (status, slots): (&str, Vec<usize>) = match &record.verdict {
                ReflectionVerdict::Accept => ("ACCEPT", vec![]),
                ReflectionVerdict::Revise(reps) => ("REVISE", reps.iter().map(|s| s.slot).collect()),
            };
            let mut payload = json!({
                "manager": m,
                "round": round,
                "status": status,
                "replacements": slots.len(),
                "slots": slots,
                "rationale": record.rationale,
            });
            if record.forced_accept {
                payload["forced_accept"] = json!(true);
                payload["escalation"] = json!(flag_name(REFLECT_LIMIT_REACHED));
                forced = true;
            }
            self.emit(env, EventKind::Reflect, step, payload, (asked.tokens_in, asked.tokens_out))?;
            match record.verdict {
                ReflectionVerdict::Accept => break,
                ReflectionVerdict::Revise(reps) => batch = reps,
            }
        }

        // Reduce phase.
        let ok: Vec<&SubtaskResult> = current.values().filter(|r| r.is_ok()).collect();
        let failed: Vec<&SubtaskResult> = current.values().filter(|r| !r.is_ok()).collect();
        if ok.is_empty() {
            let mut by_status: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &failed {
                *by_status.entry(r.status.as_str()).or_default() += 1;
            }
            let detail: Vec<String> = by_status.iter().map(|(s, n)| format!("{s} x{n}")).collect();
            let note = format!(
                "Manager `{m}` could not complete the step: all {} subtasks failed ({}).",
                failed.len(),
                detail.join(", ")
            );
            self.emit(
                env,
                EventKind::Aggregate,
                step,
                json!({"manager": m, "failed": true, "summary": note, "subtask_count": 0, "failed_slots": failed.len(), "waves": waves, "step_makespan": step_makespan}),
                (0, 0),
            )?;
            return Err(ManagerError::StepFailed(note));
        }
        let results = render_results(&ok);
        let failures = render_failures(&failed);
        let prompt = self.templates.render(
            MANAGER_AGGREGATE,
            &[("manager", &m), ("directive", &d.text), ("results", &results), ("failures", &failures)],
        );
        let asked = self
            .ask(prompt, vec![format!("{m}:aggregate:{step}"), format!("{m}:aggregate")])
            .await;
        let Some(completion) = asked.completion else {
            let note = format!("Manager `{m}` could not summarize the step results.");
            self.emit(
                env,
                EventKind::Aggregate,
                step,
                json!({"manager": m, "failed": true, "summary": note, "error": asked.error, "subtask_count": 0, "waves": waves, "step_makespan": step_makespan}),
                (0, 0),
            )?;
            return Err(ManagerError::StepFailed(note));
        };
        let summary_text = completion.text.trim().to_string();
        let mut scanned: Vec<&str> = ok.iter().map(|r| r.text.as_str()).collect();
        scanned.push(&summary_text);
        let mut flags = self.escalation_flags(&scanned);
        if forced {
            flags.insert(flag_name(REFLECT_LIMIT_REACHED));
        }
        self.emit(
            env,
            EventKind::Aggregate,
            step,
            json!({
                "manager": m,
                "summary": summary_text,
                "subtask_count": ok.len(),
                "failed_slots": failed.len(),
                "flags": flags,
                "waves": waves,
                "step_makespan": step_makespan,
            }),
            (asked.tokens_in, asked.tokens_out),
        )?;
        Ok(StepSummary {
            text: summary_text,
            source_manager: self.cfg.id.clone(),
            subtask_count: ok.len(),
            escalation_flags: flags,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn revs(n: usize) -> BTreeMap<usize, u32> {
        (0..n).map(|k| (k, 0)).collect()
    }

    #[test]
    fn dedup_keeps_first_and_normalizes() {
        let out = dedup_subtasks(vec![
            "  caf\u{e9} hours ".into(),
            "cafe\u{301} hours".into(),
            "".into(),
            "other".into(),
        ]);
        assert_eq!(out, vec!["caf\u{e9} hours".to_string(), "other".to_string()]);
    }

    #[test]
    fn reflect_accept() {
        let r = interpret_reflection(r#"{"status":"ACCEPT"}"#, 1, &revs(2), 1, 3);
        assert_eq!(r.verdict, ReflectionVerdict::Accept);
        assert!(!r.forced_accept && !r.parse_failed);
    }

    #[test]
    fn reflect_revise_bumps_revision_and_drops_unknown_slots() {
        let mut rv = revs(3);
        rv.insert(1, 2);
        let r = interpret_reflection(
            r#"{"status":"REVISE","replacements":[{"slot":1,"text":"try the archive"},{"slot":9,"text":"x"}],"rationale":"slot 1 failed"}"#,
            4,
            &rv,
            1,
            3,
        );
        assert_eq!(
            r.verdict,
            ReflectionVerdict::Revise(vec![Subtask {
                text: "try the archive".into(),
                step_index: 4,
                slot: 1,
                revision: 3
            }])
        );
    }

    #[test]
    fn reflect_forced_at_limit() {
        let r = interpret_reflection(
            r#"{"status":"REVISE","replacements":[{"slot":0,"text":"again"}]}"#,
            1,
            &revs(1),
            3,
            3,
        );
        assert_eq!(r.verdict, ReflectionVerdict::Accept);
        assert!(r.forced_accept);
    }

    #[test]
    fn reflect_garbage_accepts() {
        let r = interpret_reflection("looks fine to me", 1, &revs(1), 1, 3);
        assert_eq!(r.verdict, ReflectionVerdict::Accept);
        assert!(r.parse_failed);
    }

    #[test]
    fn decomposition_parsing() {
        assert_eq!(parse_decomposition(r#"{"subtasks":["a","b","a"]}"#).unwrap(), vec!["a", "b"]);
        assert!(parse_decomposition(r#"{"subtasks":[]}"#).is_err());
        assert!(parse_decomposition(r#"{"subtasks":["a"]} extra"#).is_err());
        assert!(parse_decomposition("1. a\n2. b").is_err());
    }

    #[test]
    fn marker_names() {
        assert_eq!(flag_name(BROWSER_RECOMMENDED), "BROWSER_RECOMMENDED");
    }

    proptest! {
        #[test]
        fn dedup_output_is_pairwise_distinct(v in proptest::collection::vec("[ab\u{e9} ]{0,4}", 0..12)) {
            let out = dedup_subtasks(v.clone());
            let normalized: BTreeSet<String> = out.iter().map(|t| nfc(t)).collect();
            prop_assert_eq!(normalized.len(), out.len());
            prop_assert!(out.iter().all(|t| !t.is_empty() && t.trim() == t));
            prop_assert!(out.len() <= v.len());
        }

        #[test]
        fn revisions_strictly_increase(slot in 0usize..5, rev in 0u32..10, round in 1u32..3) {
            let mut rv = revs(5);
            rv.insert(slot, rev);
            let raw = format!(r#"{{"status":"REVISE","replacements":[{{"slot":{slot},"text":"t"}}]}}"#);
            let r = interpret_reflection(&raw, 1, &rv, round, 3);
            match r.verdict {
                ReflectionVerdict::Revise(reps) => {
                    prop_assert_eq!(reps.len(), 1);
                    prop_assert_eq!(reps[0].revision, rev + 1);
                }
                ReflectionVerdict::Accept => prop_assert!(false, "expected REVISE below the limit"),
            }
        }
    }
}
