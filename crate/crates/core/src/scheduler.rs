//! Bounded-concurrency wave execution and the step timing model.
//!
//! A wave runs one batch of subtasks with at most `budget` runners in flight.
//! Admission is greedy in slot order: each subtask takes the earliest free
//! runner slot (lowest slot index on ties). On the virtual clock the schedule
//! is computed from declared durations before anything runs, so timing is
//! exact and reproducible; runners still execute concurrently under the same
//! budget.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::domain::{Subtask, SubtaskResult, SubtaskStatus};
use crate::telemetry::PendingEvent;

pub const DEFAULT_BUDGET: usize = 8;
pub const DEFAULT_SUBTASK_TIMEOUT_SECS: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Wall,
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub budget: usize,
    pub subtask_timeout_secs: f64,
    pub clock: ClockMode,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            subtask_timeout_secs: DEFAULT_SUBTASK_TIMEOUT_SECS,
            clock: ClockMode::Wall,
        }
    }
}

/// `T_seq`: plain left-to-right sum.
pub fn makespan_seq(durations: &[f64]) -> f64 {
    durations.iter().fold(0.0, |acc, d| acc + d)
}

/// Start/finish offsets for greedy list scheduling in slot order.
pub fn list_schedule(durations: &[f64], budget: usize) -> Vec<(f64, f64)> {
    assert!(budget >= 1, "budget must be at least 1");
    let mut free = vec![0.0_f64; budget.min(durations.len()).max(1)];
    let mut out = Vec::with_capacity(durations.len());
    for &d in durations {
        let (idx, start) = free
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, t)| if t < best.1 { (i, t) } else { best });
        let finish = start + d;
        free[idx] = finish;
        out.push((start, finish));
    }
    out
}

/// `T_par` under a concurrency budget. With `budget >= len` this is the
/// maximum duration; otherwise the greedy list-scheduling makespan.
pub fn makespan_par(durations: &[f64], budget: usize) -> f64 {
    list_schedule(durations, budget)
        .into_iter()
        .fold(0.0, |acc, (_, f)| if f > acc { f } else { acc })
}

/// Latest progress text a runner has published; used for timeout results.
#[derive(Debug, Clone, Default)]
pub struct PartialText(Arc<Mutex<Option<String>>>);

impl PartialText {
    pub fn set(&self, text: impl Into<String>) {
        *self.0.lock().unwrap() = Some(text.into());
    }

    pub fn get(&self) -> Option<String> {
        self.0.lock().unwrap().clone()
    }
}

/// What a runner hands back for one subtask.
#[derive(Debug, Clone, PartialEq)]
pub struct RunnerOutput {
    pub status: SubtaskStatus,
    pub text: String,
    pub tool_call_count: usize,
    pub tool_turns: usize,
    /// Worker-side events, flushed to the run trace after the wave.
    pub events: Vec<PendingEvent>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub local_trace_path: Option<String>,
}

impl RunnerOutput {
    pub fn text(status: SubtaskStatus, text: impl Into<String>) -> Self {
        Self {
            status,
            text: text.into(),
            tool_call_count: 0,
            tool_turns: 0,
            events: Vec::new(),
            tokens_in: 0,
            tokens_out: 0,
            local_trace_path: None,
        }
    }
}

/// Where a runner sits on the clock when it starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSlot {
    pub wave_start: f64,
    pub start_offset: f64,
}

#[async_trait]
pub trait SubtaskRunner: Send + Sync {
    async fn run(&self, subtask: Subtask, slot: RunSlot, partial: PartialText) -> RunnerOutput;
}

/// Declared per-subtask durations for the virtual clock.
pub trait DurationModel: Send + Sync {
    fn duration_of(&self, subtask: &Subtask) -> f64;
}

impl<F> DurationModel for F
where
    F: Fn(&Subtask) -> f64 + Send + Sync,
{
    fn duration_of(&self, subtask: &Subtask) -> f64 {
        self(subtask)
    }
}

/// One executed subtask with its timing relative to the wave start.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub result: SubtaskResult,
    pub start: f64,
    pub finish: f64,
    pub tool_turns: usize,
    pub events: Vec<PendingEvent>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub local_trace_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveOutcome {
    /// In slot order, independent of completion order.
    pub executions: Vec<Execution>,
    pub makespan: f64,
    /// Highest number of runners observed in flight at once.
    pub max_in_flight: usize,
}

impl WaveOutcome {
    pub fn results(&self) -> Vec<SubtaskResult> {
        self.executions.iter().map(|e| e.result.clone()).collect()
    }

    /// Number of distinct admission instants.
    pub fn admission_groups(&self) -> usize {
        let mut starts: Vec<f64> = self.executions.iter().map(|e| e.start).collect();
        starts.sort_by(f64::total_cmp);
        starts.dedup();
        starts.len()
    }

    /// Indices into `executions` ordered by `(finish, slot)`.
    pub fn completion_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.executions.len()).collect();
        idx.sort_by(|&a, &b| {
            let (ea, eb) = (&self.executions[a], &self.executions[b]);
            ea.finish
                .total_cmp(&eb.finish)
                .then(ea.result.subtask.slot.cmp(&eb.result.subtask.slot))
        });
        idx
    }
}

pub struct Scheduler {
    cfg: SchedulerConfig,
    durations: Option<Arc<dyn DurationModel>>,
}

struct InFlight {
    current: AtomicUsize,
    max: AtomicUsize,
}

impl InFlight {
    fn enter(&self) {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.max.fetch_max(now, Ordering::SeqCst);
    }

    fn leave(&self) {
        self.current.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Self {
        assert!(cfg.budget >= 1, "budget must be at least 1");
        Self { cfg, durations: None }
    }

    pub fn with_durations(mut self, model: Arc<dyn DurationModel>) -> Self {
        self.durations = Some(model);
        self
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn budget(&self) -> usize {
        self.cfg.budget
    }

    /// Runs every subtask exactly once with at most `budget` in flight.
    /// `wave_start` is the clock reading at admission of the first subtask.
    pub async fn execute_wave(
        &self,
        batch: &[Subtask],
        runner: Arc<dyn SubtaskRunner>,
        wave_start: f64,
    ) -> WaveOutcome {
        match self.cfg.clock {
            ClockMode::Virtual => self.execute_virtual(batch, runner, wave_start).await,
            ClockMode::Wall => self.execute_wall(batch, runner, wave_start).await,
        }
    }

    async fn execute_virtual(
        &self,
        batch: &[Subtask],
        runner: Arc<dyn SubtaskRunner>,
        wave_start: f64,
    ) -> WaveOutcome {
        let timeout = self.cfg.subtask_timeout_secs;
        let declared: Vec<f64> = batch
            .iter()
            .map(|st| {
                let d = self.durations.as_ref().map(|m| m.duration_of(st)).unwrap_or(0.0);
                assert!(d.is_finite() && d >= 0.0, "durations must be finite and non-negative");
                d
            })
            .collect();
        // A subtask past its timeout occupies its slot for exactly the timeout.
        let occupied: Vec<f64> = declared.iter().map(|&d| if d > timeout { timeout } else { d }).collect();
        let schedule = list_schedule(&occupied, self.cfg.budget);
        let makespan = schedule.iter().fold(0.0, |acc, &(_, f)| if f > acc { f } else { acc });

        let gate = Arc::new(Semaphore::new(self.cfg.budget));
        let in_flight = Arc::new(InFlight {
            current: AtomicUsize::new(0),
            max: AtomicUsize::new(0),
        });
        let mut set = JoinSet::new();
        let mut outputs: Vec<Option<RunnerOutput>> = vec![None; batch.len()];
        for (i, st) in batch.iter().enumerate() {
            if declared[i] > timeout {
                outputs[i] = Some(RunnerOutput::text(SubtaskStatus::Timeout, ""));
                continue;
            }
            let permit = gate.clone().acquire_owned().await.expect("semaphore never closed");
            let runner = runner.clone();
            let st = st.clone();
            let slot = RunSlot {
                wave_start,
                start_offset: schedule[i].0,
            };
            let in_flight = in_flight.clone();
            set.spawn(async move {
                in_flight.enter();
                let out = runner.run(st, slot, PartialText::default()).await;
                in_flight.leave();
                drop(permit);
                (i, out)
            });
        }
        while let Some(joined) = set.join_next().await {
            let (i, out) = joined.expect("subtask runner panicked");
            outputs[i] = Some(out);
        }

        let executions = batch
            .iter()
            .zip(outputs)
            .zip(schedule)
            .map(|((st, out), (start, finish))| {
                let out = out.expect("every subtask produces an output");
                into_execution(st, out, start, finish)
            })
            .collect();
        WaveOutcome {
            executions,
            makespan,
            max_in_flight: in_flight.max.load(Ordering::SeqCst),
        }
    }

    async fn execute_wall(
        &self,
        batch: &[Subtask],
        runner: Arc<dyn SubtaskRunner>,
        wave_start: f64,
    ) -> WaveOutcome {
        let timeout = Duration::from_secs_f64(self.cfg.subtask_timeout_secs);
        let origin = Instant::now();
        let gate = Arc::new(Semaphore::new(self.cfg.budget));
        let in_flight = Arc::new(InFlight {
            current: AtomicUsize::new(0),
            max: AtomicUsize::new(0),
        });
        let mut set = JoinSet::new();
        for (i, st) in batch.iter().enumerate() {
            // Acquired in slot order, so admission follows slot order.
            let permit = gate.clone().acquire_owned().await.expect("semaphore never closed");
            let runner = runner.clone();
            let st = st.clone();
            let in_flight = in_flight.clone();
            set.spawn(async move {
                let start = origin.elapsed().as_secs_f64();
                in_flight.enter();
                let partial = PartialText::default();
                let slot = RunSlot {
                    wave_start,
                    start_offset: start,
                };
                let out = match tokio::time::timeout(timeout, runner.run(st, slot, partial.clone())).await {
                    Ok(out) => out,
                    Err(_) => RunnerOutput::text(SubtaskStatus::Timeout, partial.get().unwrap_or_default()),
                };
                in_flight.leave();
                let finish = origin.elapsed().as_secs_f64();
                drop(permit);
                (i, out, start, finish)
            });
        }
        let mut slots: Vec<Option<(RunnerOutput, f64, f64)>> = vec![None; batch.len()];
        while let Some(joined) = set.join_next().await {
            let (i, out, start, finish) = joined.expect("subtask runner panicked");
            slots[i] = Some((out, start, finish));
        }
        let makespan = origin.elapsed().as_secs_f64();
        let executions = batch
            .iter()
            .zip(slots)
            .map(|(st, s)| {
                let (out, start, finish) = s.expect("every subtask produces an output");
                into_execution(st, out, start, finish)
            })
            .collect();
        WaveOutcome {
            executions,
            makespan,
            max_in_flight: in_flight.max.load(Ordering::SeqCst),
        }
    }
}

fn into_execution(st: &Subtask, out: RunnerOutput, start: f64, finish: f64) -> Execution {
    Execution {
        result: SubtaskResult {
            subtask: st.clone(),
            status: out.status,
            text: out.text,
            tool_call_count: out.tool_call_count,
            duration: finish - start,
        },
        start,
        finish,
        tool_turns: out.tool_turns,
        events: out.events,
        tokens_in: out.tokens_in,
        tokens_out: out.tokens_out,
        local_trace_path: out.local_trace_path,
    }
}
