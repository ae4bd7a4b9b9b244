//! Append-only event trace, run metrics, speedup and trace verification.
//!
//! Traces are newline-delimited JSON, one [`TraceEvent`] per line. Sequence
//! numbers are assigned by the sink so concurrent emitters still produce a
//! total order. For golden comparisons, [`mask_event`] blanks the fields that
//! depend on the wall clock or the filesystem:
//!
//! * `time` of events recorded on the wall clock;
//! * payload keys `start`, `finish`, `duration`, `makespan`, `step_makespan`
//!   on wall-clock events;
//! * any payload key ending in `_path`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::scheduler::makespan_par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Actor {
    Host,
    Manager,
    Worker,
    Scheduler,
    Tool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Step,
    Stop,
    Decompose,
    Execute,
    Reflect,
    Aggregate,
    ToolCall,
    ToolResult,
    Finalize,
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    Wall,
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub time: f64,
    pub clock: ClockKind,
    pub actor: Actor,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u32>,
    #[serde(default)]
    pub payload: Value,
    #[serde(default)]
    pub tokens_in: u64,
    #[serde(default)]
    pub tokens_out: u64,
}

/// An event not yet sequenced.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingEvent {
    pub actor: Actor,
    pub kind: EventKind,
    pub step: Option<u32>,
    pub payload: Value,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl PendingEvent {
    pub fn new(actor: Actor, kind: EventKind, step: Option<u32>, payload: Value) -> Self {
        Self {
            actor,
            kind,
            step,
            payload,
            tokens_in: 0,
            tokens_out: 0,
        }
    }

    pub fn with_tokens(mut self, tokens_in: u64, tokens_out: u64) -> Self {
        self.tokens_in = tokens_in;
        self.tokens_out = tokens_out;
        self
    }
}

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("out-of-order event: expected seq {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("virtual time went backwards at seq {seq}: {prev} -> {time}")]
    TimeRegression { seq: u64, prev: f64, time: f64 },
    #[error("trace sink unavailable: {0}")]
    SinkUnavailable(#[from] std::io::Error),
    #[error("truncated trace: {0}")]
    TruncatedTrace(String),
    #[error("trace has no per-subtask virtual durations")]
    MissingDurations,
}

/// Engine clock: wall seconds since run start, or a virtual counter that
/// only the scheduler advances.
#[derive(Debug, Clone)]
pub enum Clock {
    Wall(Instant),
    Virtual(Arc<Mutex<f64>>),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall(Instant::now())
    }

    pub fn virtual_at_zero() -> Self {
        Clock::Virtual(Arc::new(Mutex::new(0.0)))
    }

    pub fn kind(&self) -> ClockKind {
        match self {
            Clock::Wall(_) => ClockKind::Wall,
            Clock::Virtual(_) => ClockKind::Virtual,
        }
    }

    pub fn now(&self) -> f64 {
        match self {
            Clock::Wall(start) => start.elapsed().as_secs_f64(),
            Clock::Virtual(t) => *t.lock().unwrap(),
        }
    }

    /// Moves virtual time forward to `t`; a no-op on the wall clock.
    pub fn advance_to(&self, t: f64) {
        if let Clock::Virtual(now) = self {
            let mut now = now.lock().unwrap();
            if t > *now {
                *now = t;
            }
        }
    }
}

struct SinkState {
    events: Vec<TraceEvent>,
    file: Option<BufWriter<File>>,
    last_virtual: f64,
}

/// Shared, totally ordered event sink.
#[derive(Clone)]
pub struct Tracer {
    state: Arc<Mutex<SinkState>>,
    clock: Clock,
    path: Option<PathBuf>,
}

impl Tracer {
    pub fn in_memory(clock: Clock) -> Self {
        Self {
            state: Arc::new(Mutex::new(SinkState {
                events: Vec::new(),
                file: None,
                last_virtual: 0.0,
            })),
            clock,
            path: None,
        }
    }

    /// Also writes every event to `path`, flushing after each line.
    pub fn with_file(clock: Clock, path: &Path) -> Result<Self, TelemetryError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = File::create(path)?;
        let tracer = Self::in_memory(clock);
        tracer.state.lock().unwrap().file = Some(BufWriter::new(file));
        Ok(Self {
            path: Some(path.to_path_buf()),
            ..tracer
        })
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Appends a fully formed event; `seq` must be the next number.
    pub fn record(&self, evt: TraceEvent) -> Result<(), TelemetryError> {
        let mut state = self.state.lock().unwrap();
        Self::append(&mut state, evt)
    }

    fn append(state: &mut SinkState, evt: TraceEvent) -> Result<(), TelemetryError> {
        let expected = state.events.len() as u64;
        if evt.seq != expected {
            return Err(TelemetryError::OutOfOrder {
                expected,
                got: evt.seq,
            });
        }
        if evt.clock == ClockKind::Virtual {
            if evt.time < state.last_virtual {
                return Err(TelemetryError::TimeRegression {
                    seq: evt.seq,
                    prev: state.last_virtual,
                    time: evt.time,
                });
            }
            state.last_virtual = evt.time;
        }
        if let Some(file) = state.file.as_mut() {
            let line = serde_json::to_string(&evt).expect("trace events serialize");
            writeln!(file, "{line}")?;
            file.flush()?;
        }
        state.events.push(evt);
        Ok(())
    }

    /// Sequences and records `pending` at the current clock time.
    pub fn emit(&self, pending: PendingEvent) -> Result<u64, TelemetryError> {
        let time = self.clock.now();
        self.emit_at(pending, time)
    }

    /// Sequences and records `pending` at an explicit time.
    pub fn emit_at(&self, pending: PendingEvent, time: f64) -> Result<u64, TelemetryError> {
        let mut state = self.state.lock().unwrap();
        let seq = state.events.len() as u64;
        let evt = TraceEvent {
            seq,
            time,
            clock: self.clock.kind(),
            actor: pending.actor,
            kind: pending.kind,
            step: pending.step,
            payload: pending.payload,
            tokens_in: pending.tokens_in,
            tokens_out: pending.tokens_out,
        };
        Self::append(&mut state, evt)?;
        Ok(seq)
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.state.lock().unwrap().events.clone()
    }

    pub fn handle(&self) -> TraceHandle {
        TraceHandle {
            events: self.events(),
            path: self.path.clone(),
        }
    }
}

/// A finished (or partial) trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceHandle {
    pub events: Vec<TraceEvent>,
    pub path: Option<PathBuf>,
}

impl TraceHandle {
    pub fn masked_jsonl(&self) -> String {
        to_masked_jsonl(&self.events)
    }
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TraceEvent>, TelemetryError> {
    if text.trim().is_empty() {
        return Err(TelemetryError::TruncatedTrace("trace is empty".into()));
    }
    let mut events = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let evt: TraceEvent = serde_json::from_str(line)
            .map_err(|e| TelemetryError::TruncatedTrace(format!("line {}: {e}", n + 1)))?;
        events.push(evt);
    }
    Ok(events)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TelemetryError> {
    let file = File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_jsonl(&text)
}

const WALL_TIMING_KEYS: &[&str] = &["start", "finish", "duration", "makespan", "step_makespan"];
pub const MASK: &str = "<masked>";

fn mask_payload(value: &mut Value, wall: bool) {
    match value {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if k.ends_with("_path") || (wall && WALL_TIMING_KEYS.contains(&k.as_str())) {
                    *v = Value::String(MASK.into());
                } else {
                    mask_payload(v, wall);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| mask_payload(v, wall)),
        _ => {}
    }
}

/// Copy of `evt` with nondeterministic fields blanked.
pub fn mask_event(evt: &TraceEvent) -> Value {
    let wall = evt.clock == ClockKind::Wall;
    let mut v = serde_json::to_value(evt).expect("trace events serialize");
    if wall {
        v["time"] = Value::String(MASK.into());
    }
    mask_payload(&mut v["payload"], wall);
    v
}

pub fn to_masked_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&mask_event(e).to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub total_steps: usize,
    /// Sum of decomposed batch sizes `P_t`.
    pub total_subtasks: usize,
    /// Subtask executions including revisions.
    pub total_executions: usize,
    pub total_tool_calls: usize,
    pub subtasks_per_step: Vec<usize>,
    pub waves_per_step: Vec<Vec<usize>>,
    pub makespan_per_step: Vec<f64>,
    pub tokens_by_role: BTreeMap<String, TokenTotals>,
    pub total_tokens: u64,
}

impl RunMetrics {
    pub fn avg_tool_calls_per_step(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            self.total_tool_calls as f64 / self.total_steps as f64
        }
    }

    pub fn total_makespan(&self) -> f64 {
        self.makespan_per_step.iter().sum()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28}{}\n", "total steps", self.total_steps));
        out.push_str(&format!("{:<28}{}\n", "total subtasks", self.total_subtasks));
        out.push_str(&format!("{:<28}{}\n", "total executions", self.total_executions));
        out.push_str(&format!("{:<28}{}\n", "total tool calls", self.total_tool_calls));
        out.push_str(&format!("{:<28}{:.3}\n", "tool calls per step", self.avg_tool_calls_per_step()));
        for (i, (p, m)) in self.subtasks_per_step.iter().zip(&self.makespan_per_step).enumerate() {
            out.push_str(&format!(
                "{:<28}subtasks={} waves={:?} makespan={:.3}\n",
                format!("step {}", i + 1),
                p,
                self.waves_per_step.get(i).cloned().unwrap_or_default(),
                m
            ));
        }
        for (role, t) in &self.tokens_by_role {
            out.push_str(&format!("{:<28}in={} out={}\n", format!("tokens ({role})"), t.tokens_in, t.tokens_out));
        }
        out.push_str(&format!("{:<28}{}\n", "total tokens", self.total_tokens));
        out
    }
}

fn role_of(actor: Actor) -> Option<&'static str> {
    match actor {
        Actor::Host => Some("host"),
        Actor::Manager => Some("manager"),
        Actor::Worker => Some("worker"),
        Actor::Scheduler | Actor::Tool => None,
    }
}

fn is_terminal(evt: &TraceEvent) -> bool {
    evt.kind == EventKind::Finalize
        || (evt.kind == EventKind::Error && evt.payload.get("fatal").and_then(Value::as_bool) == Some(true))
}

fn require_complete(events: &[TraceEvent]) -> Result<(), TelemetryError> {
    match events.last() {
        None => Err(TelemetryError::TruncatedTrace("trace is empty".into())),
        Some(last) if is_terminal(last) => Ok(()),
        Some(last) => Err(TelemetryError::TruncatedTrace(format!(
            "last event (seq {}) is {:?}, expected FINALIZE",
            last.seq, last.kind
        ))),
    }
}

fn u64_field(v: &Value, key: &str) -> Option<u64> {
    v.get(key).and_then(Value::as_u64)
}

fn f64_field(v: &Value, key: &str) -> Option<f64> {
    v.get(key).and_then(Value::as_f64)
}

/// Aggregate statistics over a complete trace.
pub fn summarize(events: &[TraceEvent]) -> Result<RunMetrics, TelemetryError> {
    require_complete(events)?;
    let mut m = RunMetrics::default();
    let mut step_order: Vec<u32> = Vec::new();
    let mut per_step: BTreeMap<u32, (usize, BTreeMap<u64, usize>, f64)> = BTreeMap::new();
    for e in events {
        if let Some(role) = role_of(e.actor) {
            let t = m.tokens_by_role.entry(role.to_string()).or_default();
            t.tokens_in += e.tokens_in;
            t.tokens_out += e.tokens_out;
        }
        m.total_tokens += e.tokens_in + e.tokens_out;
        match e.kind {
            EventKind::Step => {
                m.total_steps += 1;
                if let Some(s) = e.step {
                    step_order.push(s);
                    per_step.entry(s).or_default();
                }
            }
            EventKind::Decompose => {
                let n = u64_field(&e.payload, "count").unwrap_or(0) as usize;
                m.total_subtasks += n;
                if let Some(s) = e.step {
                    per_step.entry(s).or_default().0 += n;
                }
            }
            EventKind::Execute => {
                m.total_executions += 1;
                if let Some(s) = e.step {
                    let wave = u64_field(&e.payload, "wave").unwrap_or(1);
                    *per_step.entry(s).or_default().1.entry(wave).or_default() += 1;
                }
            }
            EventKind::ToolCall => m.total_tool_calls += 1,
            EventKind::Aggregate => {
                if let (Some(s), Some(ms)) = (e.step, f64_field(&e.payload, "step_makespan")) {
                    per_step.entry(s).or_default().2 = ms;
                }
            }
            _ => {}
        }
    }
    for s in &step_order {
        let (p, waves, ms) = per_step.get(s).cloned().unwrap_or_default();
        m.subtasks_per_step.push(p);
        m.waves_per_step.push(waves.values().copied().collect());
        m.makespan_per_step.push(ms);
    }
    Ok(m)
}

/// Per-step list of waves, each wave the virtual durations in slot order.
fn wave_durations(events: &[TraceEvent]) -> Result<Vec<Vec<Vec<f64>>>, TelemetryError> {
    let mut steps: BTreeMap<u32, BTreeMap<u64, Vec<(u64, f64)>>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::Execute) {
        if e.clock != ClockKind::Virtual {
            return Err(TelemetryError::MissingDurations);
        }
        let d = f64_field(&e.payload, "duration").ok_or(TelemetryError::MissingDurations)?;
        let slot = u64_field(&e.payload, "slot").unwrap_or(0);
        let wave = u64_field(&e.payload, "wave").unwrap_or(1);
        steps
            .entry(e.step.unwrap_or(0))
            .or_default()
            .entry(wave)
            .or_default()
            .push((slot, d));
    }
    if steps.is_empty() {
        return Err(TelemetryError::MissingDurations);
    }
    Ok(steps
        .into_values()
        .map(|waves| {
            waves
                .into_values()
                .map(|mut w| {
                    w.sort_by_key(|(slot, _)| *slot);
                    w.into_iter().map(|(_, d)| d).collect()
                })
                .collect()
        })
        .collect())
}

/// `Σ T_seq(step) / Σ T_par(step, budget)` over a virtual-clock trace.
/// Each step's parallel time is the sum of its waves' list-scheduling makespans.
pub fn compute_speedup(events: &[TraceEvent], budget: usize) -> Result<f64, TelemetryError> {
    let steps = wave_durations(events)?;
    let mut seq = 0.0;
    let mut par = 0.0;
    for waves in &steps {
        for w in waves {
            seq += w.iter().fold(0.0, |acc, d| acc + d);
            par += makespan_par(w, budget);
        }
    }
    if par == 0.0 {
        return Err(TelemetryError::MissingDurations);
    }
    Ok(seq / par)
}

/// One failed trace check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub check: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub violations: Vec<Violation>,
    pub steps_checked: usize,
    pub sentinels_seen: usize,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn fail(&mut self, check: &str, detail: impl Into<String>) {
        self.violations.push(Violation {
            check: check.to_string(),
            detail: detail.into(),
        });
    }
}

/// Prefix of the unique markers mock tools embed in their payloads.
pub const SENTINEL_PREFIX: &str = "SENTINEL-";

/// All `SENTINEL-<hex>` tokens in `text`.
pub fn find_sentinels(text: &str) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    let mut rest = text;
    while let Some(pos) = rest.find(SENTINEL_PREFIX) {
        let tail = &rest[pos + SENTINEL_PREFIX.len()..];
        let hex_len = tail.chars().take_while(|c| c.is_ascii_hexdigit()).count();
        if hex_len > 0 {
            found.insert(format!("{SENTINEL_PREFIX}{}", &tail[..hex_len]));
        }
        rest = &tail[hex_len..];
    }
    found
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

/// Texts the host could have seen: directives, summaries, host notes and the
/// final answer.
fn host_visible_texts(events: &[TraceEvent]) -> Vec<(u64, String)> {
    let mut out = Vec::new();
    for e in events {
        let text = match (e.actor, e.kind) {
            (Actor::Host, EventKind::Step) => str_field(&e.payload, "directive"),
            (_, EventKind::Aggregate) => str_field(&e.payload, "summary"),
            (Actor::Host, EventKind::Warning) => str_field(&e.payload, "summary"),
            (_, EventKind::Finalize) => str_field(&e.payload, "answer"),
            _ => None,
        };
        if let Some(t) = text {
            out.push((e.seq, t.to_string()));
        }
    }
    out
}

/// Re-checks the structural invariants of a trace: sequencing, the per-step
/// event algebra, the step bound, host tool isolation and sentinel containment.
pub fn verify(events: &[TraceEvent]) -> Result<VerifyReport, TelemetryError> {
    require_complete(events)?;
    let mut report = VerifyReport::default();

    let mut last_virtual = f64::NEG_INFINITY;
    for (i, e) in events.iter().enumerate() {
        if e.seq != i as u64 {
            report.fail("sequence", format!("event {i} has seq {}", e.seq));
        }
        if e.clock == ClockKind::Virtual {
            if e.time < last_virtual {
                report.fail("virtual-time", format!("seq {} goes back to {}", e.seq, e.time));
            }
            last_virtual = e.time;
        }
        if e.kind == EventKind::ToolCall && e.actor == Actor::Host {
            report.fail("host-tool-call", format!("seq {} is a TOOL_CALL by the host", e.seq));
        }
    }

    // Per-step algebra.
    let step_events: Vec<&TraceEvent> = events
        .iter()
        .filter(|e| e.actor == Actor::Host && e.kind == EventKind::Step)
        .collect();
    for st in &step_events {
        let Some(step) = st.step else {
            report.fail("step-index", format!("STEP seq {} has no step index", st.seq));
            continue;
        };
        report.steps_checked += 1;
        let of_step: Vec<&TraceEvent> = events.iter().filter(|e| e.step == Some(step)).collect();
        let count = |k: EventKind| of_step.iter().filter(|e| e.kind == k).count();
        let decomposes: Vec<&&TraceEvent> = of_step.iter().filter(|e| e.kind == EventKind::Decompose).collect();
        let aggregates: Vec<&&TraceEvent> = of_step.iter().filter(|e| e.kind == EventKind::Aggregate).collect();
        if decomposes.len() != 1 || aggregates.len() != 1 {
            // A step may die before aggregation only if the task failed.
            let failed_task = events.last().map(|e| e.kind == EventKind::Error).unwrap_or(false);
            if !(failed_task && decomposes.len() <= 1 && aggregates.is_empty()) {
                report.fail(
                    "step-shape",
                    format!(
                        "step {step}: {} DECOMPOSE, {} AGGREGATE (want 1 and 1)",
                        decomposes.len(),
                        aggregates.len()
                    ),
                );
            }
            continue;
        }
        let dec = decomposes[0];
        let agg = aggregates[0];
        if dec.payload.get("failed").and_then(Value::as_bool) == Some(true) {
            if count(EventKind::Execute) + count(EventKind::Reflect) > 0 {
                report.fail("step-shape", format!("step {step}: work recorded after a failed decomposition"));
            }
            continue;
        }
        let reflects = count(EventKind::Reflect);
        let reflect_limit = u64_field(&dec.payload, "reflect_limit").unwrap_or(u64::MAX) as usize;
        if reflects < 1 || reflects > reflect_limit {
            report.fail(
                "reflect-bound",
                format!("step {step}: {reflects} REFLECT events, limit {reflect_limit}"),
            );
        }
        let p_t = u64_field(&dec.payload, "count").unwrap_or(0) as usize;
        let revisions: usize = of_step
            .iter()
            .filter(|e| e.kind == EventKind::Reflect)
            .map(|e| u64_field(&e.payload, "replacements").unwrap_or(0) as usize)
            .sum();
        let executes = count(EventKind::Execute);
        if executes != p_t + revisions {
            report.fail(
                "execute-count",
                format!("step {step}: {executes} EXECUTE, expected P_t {p_t} + revisions {revisions}"),
            );
        }
        for e in of_step.iter().filter(|e| e.kind == EventKind::Execute) {
            if e.seq <= dec.seq || e.seq >= agg.seq {
                report.fail(
                    "map-reduce-order",
                    format!("step {step}: EXECUTE seq {} outside DECOMPOSE..AGGREGATE", e.seq),
                );
            }
            let turns = u64_field(&e.payload, "tool_turns").unwrap_or(0);
            let max_turns = u64_field(&e.payload, "max_tool_turns").unwrap_or(u64::MAX);
            if turns > max_turns {
                report.fail(
                    "turn-bound",
                    format!("step {step} slot {:?}: {turns} tool turns > {max_turns}", e.payload.get("slot")),
                );
            }
        }
    }

    if let Some(fin) = events.iter().find(|e| e.kind == EventKind::Finalize) {
        let used = u64_field(&fin.payload, "steps_used").unwrap_or(0) as usize;
        if used != step_events.len() {
            report.fail(
                "step-count",
                format!("{} STEP events but FINALIZE reports {used}", step_events.len()),
            );
        }
        if let Some(limit) = u64_field(&fin.payload, "step_limit") {
            if step_events.len() as u64 > limit {
                report.fail("step-limit", format!("{} steps exceed limit {limit}", step_events.len()));
            }
        }
    }

    // Isolation: no tool-payload sentinel reaches host-visible text.
    let mut sentinels = BTreeSet::new();
    for e in events.iter().filter(|e| e.kind == EventKind::ToolResult) {
        sentinels.extend(find_sentinels(&e.payload.to_string()));
    }
    report.sentinels_seen = sentinels.len();
    for (seq, text) in host_visible_texts(events) {
        for s in find_sentinels(&text) {
            if sentinels.contains(&s) {
                report.fail("isolation", format!("tool payload sentinel {s} leaked into host-visible seq {seq}"));
            }
        }
    }
    Ok(report)
}
