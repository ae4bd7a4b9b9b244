//! Scripted scenarios on the virtual clock.
//!
//! A scenario directory holds `scenario.toml`, the engine config it points
//! at, scripts, tool fixtures and a `golden/` folder:
//!
//! ```toml
//! name = "restaurants"
//! task_id = "restaurants"
//! query = "..."
//! config = "engine.toml"
//! sweep = [1, 2, 4, 8]
//!
//! [overrides]
//! workers = 8
//!
//! [expect]
//! steps = 2
//! terminated_by = "STOP"
//! waves = [[2], [10]]
//! total_subtasks = 12
//! tool_calls_per_step = 6.0
//! step_managers = ["search", "search"]
//! answer_golden = "golden/answer.md"
//! trace_golden = "golden/trace.jsonl"
//! ```
//!
//! Every run is also checked by the trace verifier, for full script
//! consumption and for duration coverage unless switched off.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{CompletionRequest, Role};
use crate::config::{ConfigError, EngineConfig, Overrides, ToolsSpec};
use crate::domain::{FinalAnswer, HostContext, TaskId, TaskQuery, Termination};
use crate::scheduler::ClockMode;
use crate::telemetry::{compute_speedup, summarize, to_masked_jsonl, verify, Actor, EventKind, RunMetrics, TraceEvent};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedupExpectation {
    pub budget: usize,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Expectations {
    pub steps: Option<usize>,
    pub terminated_by: Option<String>,
    pub task_failed: bool,
    /// Per step, the size of each wave in order.
    pub waves: Option<Vec<Vec<usize>>>,
    pub total_subtasks: Option<usize>,
    pub tool_calls_per_step: Option<f64>,
    pub step_managers: Option<Vec<String>>,
    pub step_flags: Option<Vec<Vec<String>>>,
    pub answer_golden: Option<PathBuf>,
    pub answer_sha256: Option<String>,
    pub answer_contains: Vec<String>,
    pub trace_golden: Option<PathBuf>,
    pub makespan: Option<f64>,
    pub speedup: Option<SpeedupExpectation>,
    pub error_codes: Vec<String>,
    /// Slots re-executed in each revision wave, per step: `[[step, slot..]]`.
    pub revised_slots: Option<Vec<Vec<usize>>>,
    pub verify: bool,
    pub script_consumed: bool,
}

impl Default for Expectations {
    fn default() -> Self {
        Self {
            steps: None,
            terminated_by: None,
            task_failed: false,
            waves: None,
            total_subtasks: None,
            tool_calls_per_step: None,
            step_managers: None,
            step_flags: None,
            answer_golden: None,
            answer_sha256: None,
            answer_contains: Vec::new(),
            trace_golden: None,
            makespan: None,
            speedup: None,
            error_codes: Vec::new(),
            revised_slots: None,
            verify: true,
            script_consumed: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverridesFile {
    workers: Option<usize>,
    max_steps: Option<u32>,
    reflect_limit: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    task_id: String,
    query: String,
    config: PathBuf,
    #[serde(default)]
    sweep: Vec<usize>,
    #[serde(default)]
    overrides: OverridesFile,
    #[serde(default)]
    expect: Expectations,
}

/// A loaded, validated scenario.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub dir: PathBuf,
    pub task_id: String,
    pub query: String,
    pub engine: EngineConfig,
    pub sweep: Vec<usize>,
    pub expect: Expectations,
}

impl ScenarioSpec {
    /// Accepts a scenario directory or its `scenario.toml`.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let file = if path.is_dir() { path.join("scenario.toml") } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| invalid(format!("cannot read {}: {e}", file.display())))?;
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let raw: ScenarioFile = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", file.display())))?;
        let mut engine = EngineConfig::load(&dir.join(&raw.config))?;
        engine.apply(&Overrides {
            workers: raw.overrides.workers,
            max_steps: raw.overrides.max_steps,
            reflect_limit: raw.overrides.reflect_limit,
            virtual_clock: true,
            trace_out: None,
        })?;
        // Scenario traces stay in memory; the caller decides where to write.
        engine.trace = None;
        let spec = Self {
            name: raw.name,
            dir,
            task_id: raw.task_id,
            query: raw.query,
            engine,
            sweep: raw.sweep,
            expect: raw.expect,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.query.trim().is_empty() {
            return Err(invalid("query must not be empty"));
        }
        if self.engine.scheduler.clock != ClockMode::Virtual {
            return Err(invalid("scenarios run on the virtual clock"));
        }
        if let Some(s) = &self.expect.speedup {
            if s.budget < 1 || s.tolerance < 0.0 {
                return Err(invalid("expect.speedup needs budget >= 1 and tolerance >= 0"));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    /// Forces sentinel markers on every mock tool server.
    pub fn with_sentinels(mut self) -> Self {
        for m in &mut self.engine.managers {
            if let ToolsSpec::Mock { sentinels, .. } = &mut m.tools {
                *sentinels = Some(true);
            }
        }
        self
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.engine.scheduler.budget = budget;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub answer: Option<FinalAnswer>,
    pub failure: Option<String>,
    pub context: Option<HostContext>,
    pub metrics: Option<RunMetrics>,
    pub events: Vec<TraceEvent>,
    /// Every request the host backend received, in order.
    pub host_requests: Vec<CompletionRequest>,
    pub assertions: Vec<AssertionResult>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn masked_trace(&self) -> String {
        to_masked_jsonl(&self.events)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("scenario {}\n", self.name);
        for a in &self.assertions {
            out.push_str(&format!(
                "  [{}] {}{}\n",
                if a.passed { "pass" } else { "FAIL" },
                a.name,
                if a.detail.is_empty() { String::new() } else { format!(": {}", a.detail) }
            ));
        }
        out
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

struct Checks(Vec<AssertionResult>);

impl Checks {
    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.0.push(AssertionResult {
            name: name.to_string(),
            passed,
            detail: if passed { String::new() } else { detail.into() },
        });
    }

    fn eq<T: PartialEq + std::fmt::Debug>(&mut self, name: &str, got: T, want: T) {
        let detail = format!("got {got:?}, want {want:?}");
        self.check(name, got == want, detail);
    }
}

fn first_difference(a: &str, b: &str) -> String {
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    for i in 0..la.len().max(lb.len()) {
        if la.get(i) != lb.get(i) {
            return format!(
                "line {}: got {:?}, golden {:?}",
                i + 1,
                la.get(i).map(|s| s.chars().take(160).collect::<String>()),
                lb.get(i).map(|s| s.chars().take(160).collect::<String>())
            );
        }
    }
    "identical".into()
}

/// Per step `(step, [slots])` for every wave after the first.
fn revision_waves(events: &[TraceEvent]) -> Vec<Vec<usize>> {
    let mut out: Vec<(u32, u64, Vec<usize>)> = Vec::new();
    for e in events.iter().filter(|e| e.kind == EventKind::Execute) {
        let wave = e.payload["wave"].as_u64().unwrap_or(1);
        if wave < 2 {
            continue;
        }
        let step = e.step.unwrap_or(0);
        let slot = e.payload["slot"].as_u64().unwrap_or(0) as usize;
        match out.iter_mut().find(|(s, w, _)| *s == step && *w == wave) {
            Some((_, _, slots)) => slots.push(slot),
            None => out.push((step, wave, vec![slot])),
        }
    }
    out.into_iter()
        .map(|(step, _, mut slots)| {
            slots.sort();
            std::iter::once(step as usize).chain(slots).collect()
        })
        .collect()
}

pub async fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    let engine = spec.engine.build().await?;
    let query = TaskQuery::new(TaskId::new(spec.task_id.as_str()), spec.query.as_str()).map_err(|e| invalid(e.to_string()))?;
    let outcome = engine.run(query).await;
    let host_requests = engine
        .scripted_backend(Role::Host)
        .map(|b| b.requests().into_iter().filter(|r| r.role == Role::Host).collect())
        .unwrap_or_default();

    let (answer, context, failure, events) = match outcome {
        Ok(run) => (Some(run.answer), Some(run.context), None, run.trace.events),
        Err(f) => (None, None, Some(f.cause.to_string()), f.trace.events),
    };
    let metrics = summarize(&events).ok();
    let e = &spec.expect;
    let mut c = Checks(Vec::new());

    c.eq("task outcome", failure.is_some(), e.task_failed);
    if let Some(f) = &failure {
        if !e.task_failed {
            c.check("task error", false, f.clone());
        }
    }
    if e.verify {
        match verify(&events) {
            Ok(r) => {
                let detail = r.violations.iter().map(|v| format!("{}: {}", v.check, v.detail)).collect::<Vec<_>>().join("; ");
                c.check("trace verifier", r.passed(), detail);
            }
            Err(err) => c.check("trace verifier", false, err.to_string()),
        }
    }
    if e.script_consumed {
        let left = engine.unconsumed_script_keys();
        c.check("script consumed", left.is_empty(), format!("unused script keys: {left:?}"));
    }
    let misses = engine.duration_misses();
    c.check("durations cover subtasks", misses.is_empty(), format!("no duration for {misses:?}"));

    let steps: Vec<&TraceEvent> = events.iter().filter(|e| e.actor == Actor::Host && e.kind == EventKind::Step).collect();
    if let Some(n) = e.steps {
        c.eq("steps", steps.len(), n);
    }
    if let Some(t) = &e.terminated_by {
        let got = answer.as_ref().map(|a| match a.terminated_by {
            Termination::Stop => "STOP".to_string(),
            Termination::StepLimit => "STEP_LIMIT".to_string(),
        });
        c.eq("terminated by", got, Some(t.clone()));
    }
    if let Some(m) = &metrics {
        if let Some(w) = &e.waves {
            c.eq("wave sizes", m.waves_per_step.clone(), w.clone());
        }
        if let Some(n) = e.total_subtasks {
            c.eq("total subtasks", m.total_subtasks, n);
        }
        if let Some(x) = e.tool_calls_per_step {
            c.eq("tool calls per step", m.avg_tool_calls_per_step(), x);
        }
        if let Some(x) = e.makespan {
            c.eq("makespan", m.total_makespan(), x);
        }
    } else if e.waves.is_some() || e.total_subtasks.is_some() || e.makespan.is_some() {
        c.check("metrics", false, "trace could not be summarized");
    }
    if let Some(ms) = &e.step_managers {
        let got: Vec<String> = steps.iter().map(|s| s.payload["manager"].as_str().unwrap_or_default().to_string()).collect();
        c.eq("step managers", got, ms.clone());
    }
    if let Some(fl) = &e.step_flags {
        let got: Vec<Vec<String>> = context
            .as_ref()
            .map(|ctx| ctx.exchanges().iter().map(|x| x.summary.escalation_flags.iter().cloned().collect()).collect())
            .unwrap_or_default();
        c.eq("step flags", got, fl.clone());
    }
    let answer_text = answer.as_ref().map(|a| a.text.clone()).unwrap_or_default();
    if let Some(g) = &e.answer_golden {
        match std::fs::read_to_string(spec.resolve(g)) {
            Ok(golden) => c.check("answer golden", answer_text == golden, first_difference(&answer_text, &golden)),
            Err(err) => c.check("answer golden", false, format!("{}: {err}", g.display())),
        }
    }
    if let Some(d) = &e.answer_sha256 {
        c.eq("answer digest", sha256_hex(&answer_text), d.clone());
    }
    for needle in &e.answer_contains {
        c.check(&format!("answer contains {needle:?}"), answer_text.contains(needle.as_str()), "missing");
    }
    if let Some(g) = &e.trace_golden {
        let masked = to_masked_jsonl(&events);
        match std::fs::read_to_string(spec.resolve(g)) {
            Ok(golden) => c.check("trace golden", masked == golden, first_difference(&masked, &golden)),
            Err(err) => c.check("trace golden", false, format!("{}: {err}", g.display())),
        }
    }
    if let Some(s) = &e.speedup {
        match compute_speedup(&events, s.budget) {
            Ok(r) => c.check(
                "speedup",
                (r - s.value).abs() <= s.tolerance,
                format!("got {r:.4}, want {} +/- {}", s.value, s.tolerance),
            ),
            Err(err) => c.check("speedup", false, err.to_string()),
        }
    }
    if !e.error_codes.is_empty() {
        let got: BTreeSet<String> = events
            .iter()
            .filter(|e| e.kind == EventKind::Error)
            .filter_map(|e| e.payload.get("code").and_then(Value::as_str).map(String::from))
            .collect();
        for code in &e.error_codes {
            c.check(&format!("error {code} recorded"), got.contains(code), format!("recorded codes: {got:?}"));
        }
    }
    if let Some(r) = &e.revised_slots {
        c.eq("revision waves", revision_waves(&events), r.clone());
    }

    Ok(ScenarioReport {
        name: spec.name.clone(),
        answer,
        failure,
        context,
        metrics,
        events,
        host_requests,
        assertions: c.0,
    })
}

/// Runs independent scenarios, concurrently when `parallel` is set.
pub async fn run_many(specs: &[ScenarioSpec], parallel: bool) -> Vec<Result<ScenarioReport, ScenarioError>> {
    if !parallel {
        let mut out = Vec::new();
        for s in specs {
            out.push(run_scenario(s).await);
        }
        return out;
    }
    let mut set = tokio::task::JoinSet::new();
    for (i, s) in specs.iter().cloned().enumerate() {
        set.spawn(async move { (i, run_scenario(&s).await) });
    }
    let mut out: Vec<Option<Result<ScenarioReport, ScenarioError>>> = (0..specs.len()).map(|_| None).collect();
    while let Some(j) = set.join_next().await {
        let (i, r) = j.expect("scenario task panicked");
        out[i] = Some(r);
    }
    out.into_iter().map(|r| r.expect("every scenario reports")).collect()
}

/// Writes the goldens named in `spec.expect` from `report`.
pub fn bless(spec: &ScenarioSpec, report: &ScenarioReport) -> std::io::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut write = |rel: &Path, text: &str| -> std::io::Result<()> {
        let path = spec.resolve(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    if let (Some(g), Some(a)) = (&spec.expect.answer_golden, &report.answer) {
        write(g, &a.text)?;
    }
    if let Some(g) = &spec.expect.trace_golden {
        write(g, &report.masked_trace())?;
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub budget: usize,
    pub makespan: f64,
    pub speedup: f64,
}

/// One run per budget, sorted ascending by budget.
pub async fn sweep_workers(spec: &ScenarioSpec, budgets: &[usize]) -> Result<Vec<SweepRow>, ScenarioError> {
    let mut budgets: Vec<usize> = budgets.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    if budgets.first() == Some(&0) {
        return Err(invalid("budgets must be at least 1"));
    }
    let mut rows = Vec::new();
    for b in budgets {
        let report = run_scenario(&spec.clone().with_budget(b)).await?;
        let metrics = report
            .metrics
            .as_ref()
            .ok_or_else(|| invalid(format!("run at budget {b} produced no metrics: {:?}", report.failure)))?;
        let speedup = compute_speedup(&report.events, b).map_err(|e| invalid(e.to_string()))?;
        rows.push(SweepRow {
            budget: b,
            makespan: metrics.total_makespan(),
            speedup,
        });
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>8} {:>14} {:>10}\n", "workers", "makespan", "speedup");
    for r in rows {
        out.push_str(&format!("{:>8} {:>14.4} {:>10.4}\n", r.budget, r.makespan, r.speedup));
    }
    out
}

/// True when makespans never increase as the budget grows.
pub fn makespans_non_increasing(rows: &[SweepRow]) -> bool {
    rows.windows(2).all(|w| w[1].makespan <= w[0].makespan)
}

/// True when every larger budget is strictly faster.
pub fn makespans_strictly_decreasing(rows: &[SweepRow]) -> bool {
    rows.windows(2).all(|w| w[1].makespan < w[0].makespan)
}
