//! Engine configuration (TOML) and assembly of a runnable [`Engine`].
//!
//! ```toml
//! templates_dir = "templates"      # optional; built-ins otherwise
//! trace = "out/trace.jsonl"        # optional
//!
//! [host]
//! step_limit = 12
//! reprompt_limit = 1
//!
//! [scheduler]
//! budget = 8
//! subtask_timeout_secs = 300.0
//! clock = "virtual"                # or "wall"
//! [scheduler.durations]            # virtual seconds per subtask
//! default = 1.0
//! "search:1:0" = 162.0             # manager:step:slot[:revision]
//!
//! [worker]
//! max_tool_turns = 12
//! tool_retry_limit = 3
//!
//! [backends.host]
//! kind = "scripted"
//! script = "script.json"
//! [backends.manager]
//! kind = "http"
//! endpoint = "https://example.invalid/v1/chat/completions"
//! model = "some-model"
//! api_key_env = "PROVIDER_API_KEY"
//!
//! [[managers]]
//! id = "search"
//! domain = "web search"
//! capability = "finds and cross-checks facts on the open web"
//! tools = { kind = "mock", fixture = "tools/search.json" }
//! ```
//!
//! Relative paths resolve against the config file's directory. Secrets are
//! only ever read from the environment variable named by `api_key_env`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{CompletionBackend, HttpBackend, HttpBackendConfig, Role, ScriptTable, ScriptedBackend, DEFAULT_TOKEN_CEILING};
use crate::domain::{Subtask, TaskQuery};
use crate::host::{Host, HostConfig, ManagerRegistry, TaskFailed, TaskRun, DEFAULT_REPROMPT_LIMIT, DEFAULT_STEP_LIMIT};
use crate::manager::{Manager, ManagerConfig, BROWSER_RECOMMENDED, DEFAULT_DECOMPOSE_CAP, DEFAULT_REFLECT_LIMIT};
use crate::mcp::{McpClient, MockFixture, MockToolServer, Transport};
use crate::scheduler::{ClockMode, DurationModel, Scheduler, SchedulerConfig, DEFAULT_BUDGET, DEFAULT_SUBTASK_TIMEOUT_SECS};
use crate::telemetry::{Clock, TelemetryError, TraceHandle, Tracer};
use crate::templates::Templates;
use crate::worker::{WorkerConfig, DEFAULT_MAX_TOOL_TURNS, DEFAULT_TOOL_RETRY_LIMIT};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HostSection {
    pub step_limit: u32,
    pub reprompt_limit: u32,
}

impl Default for HostSection {
    fn default() -> Self {
        Self {
            step_limit: DEFAULT_STEP_LIMIT,
            reprompt_limit: DEFAULT_REPROMPT_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub budget: usize,
    pub subtask_timeout_secs: f64,
    pub clock: ClockMode,
    pub durations: BTreeMap<String, f64>,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            subtask_timeout_secs: DEFAULT_SUBTASK_TIMEOUT_SECS,
            clock: ClockMode::Wall,
            durations: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkerSection {
    pub max_tool_turns: usize,
    pub tool_retry_limit: usize,
    pub trace_dir: Option<PathBuf>,
}

impl Default for WorkerSection {
    fn default() -> Self {
        Self {
            max_tool_turns: DEFAULT_MAX_TOOL_TURNS,
            tool_retry_limit: DEFAULT_TOOL_RETRY_LIMIT,
            trace_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendSpec {
    Scripted {
        script: PathBuf,
        #[serde(default = "default_ceiling")]
        token_ceiling: u64,
    },
    Http(HttpBackendConfig),
}

fn default_ceiling() -> u64 {
    DEFAULT_TOKEN_CEILING
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsSection {
    pub host: BackendSpec,
    pub manager: BackendSpec,
    pub worker: BackendSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ToolsSpec {
    Mock {
        fixture: PathBuf,
        /// Overrides the fixture's own `sentinels` setting.
        #[serde(default)]
        sentinels: Option<bool>,
    },
    Stdio {
        command: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagerSpec {
    pub id: String,
    pub domain: String,
    pub capability: String,
    #[serde(default = "default_cap")]
    pub decompose_cap: usize,
    #[serde(default = "default_reflect")]
    pub reflect_limit: u32,
    #[serde(default = "default_markers")]
    pub escalation_markers: Vec<String>,
    pub tools: ToolsSpec,
}

fn default_cap() -> usize {
    DEFAULT_DECOMPOSE_CAP
}

fn default_reflect() -> u32 {
    DEFAULT_REFLECT_LIMIT
}

fn default_markers() -> Vec<String> {
    vec![BROWSER_RECOMMENDED.to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub host: HostSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub worker: WorkerSection,
    pub backends: BackendsSection,
    pub managers: Vec<ManagerSpec>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line style adjustments applied on top of a loaded config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub max_steps: Option<u32>,
    pub reflect_limit: Option<u32>,
    pub virtual_clock: bool,
    pub trace_out: Option<PathBuf>,
}

impl EngineConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: EngineConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(w) = o.workers {
            self.scheduler.budget = w;
        }
        if let Some(s) = o.max_steps {
            self.host.step_limit = s;
        }
        if let Some(r) = o.reflect_limit {
            for m in &mut self.managers {
                m.reflect_limit = r;
            }
        }
        if o.virtual_clock {
            self.scheduler.clock = ClockMode::Virtual;
        }
        if let Some(t) = &o.trace_out {
            // Taken as given, not relative to the config directory.
            self.trace = Some(std::path::absolute(t).unwrap_or_else(|_| t.clone()));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.host.step_limit < 1 {
            return Err(invalid("host.step_limit must be at least 1"));
        }
        if self.scheduler.budget < 1 {
            return Err(invalid("scheduler.budget must be at least 1"));
        }
        if self.scheduler.subtask_timeout_secs.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(invalid("scheduler.subtask_timeout_secs must be positive"));
        }
        if let Some((k, v)) = self.scheduler.durations.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("scheduler.durations.{k} = {v} is not a non-negative number")));
        }
        if self.worker.max_tool_turns < 1 {
            return Err(invalid("worker.max_tool_turns must be at least 1"));
        }
        if self.managers.is_empty() {
            return Err(invalid("at least one [[managers]] entry is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.managers {
            if m.id.trim().is_empty() || m.id.contains(':') {
                return Err(invalid(format!("manager id `{}` must be non-empty and contain no ':'", m.id)));
            }
            if !seen.insert(m.id.as_str()) {
                return Err(invalid(format!("manager `{}` is listed twice", m.id)));
            }
            if m.decompose_cap < 1 || m.reflect_limit < 1 {
                return Err(invalid(format!("manager `{}`: decompose_cap and reflect_limit must be at least 1", m.id)));
            }
            if let ToolsSpec::Mock { fixture, .. } = &m.tools {
                self.require_file(fixture, &format!("manager `{}` tool fixture", m.id))?;
            }
        }
        for (role, spec) in [("host", &self.backends.host), ("manager", &self.backends.manager), ("worker", &self.backends.worker)] {
            if let BackendSpec::Scripted { script, .. } = spec {
                self.require_file(script, &format!("{role} script"))?;
            }
        }
        if let Some(dir) = &self.templates_dir {
            if !self.resolve(dir).is_dir() {
                return Err(invalid(format!("templates_dir {} does not exist", self.resolve(dir).display())));
            }
        }
        Ok(())
    }

    fn require_file(&self, p: &Path, what: &str) -> Result<(), ConfigError> {
        if self.resolve(p).is_file() {
            Ok(())
        } else {
            Err(invalid(format!("{what} {} does not exist", self.resolve(p).display())))
        }
    }

    pub async fn build(&self) -> Result<Engine, ConfigError> {
        self.validate()?;
        let templates = Arc::new(match &self.templates_dir {
            Some(dir) => Templates::from_dir(&self.resolve(dir)).map_err(|source| ConfigError::Io {
                path: self.resolve(dir),
                source,
            })?,
            None => Templates::default(),
        });

        let mut scripted: BTreeMap<&'static str, Arc<ScriptedBackend>> = BTreeMap::new();
        let mut shared: Vec<((PathBuf, u64), Arc<ScriptedBackend>)> = Vec::new();
        let mut backend_for = |role: Role, spec: &BackendSpec| -> Result<Arc<dyn CompletionBackend>, ConfigError> {
            match spec {
                BackendSpec::Scripted { script, token_ceiling } => {
                    let path = self.resolve(script);
                    let key = (path.clone(), *token_ceiling);
                    // Roles pointing at the same script share one backend.
                    let backend = match shared.iter().find(|(k, _)| *k == key) {
                        Some((_, b)) => b.clone(),
                        None => {
                            let table = ScriptTable::load(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                            let b = Arc::new(ScriptedBackend::new(table).with_token_ceiling(*token_ceiling));
                            shared.push((key, b.clone()));
                            b
                        }
                    };
                    scripted.insert(role.as_str(), backend.clone());
                    Ok(backend)
                }
                BackendSpec::Http(cfg) => Ok(Arc::new(HttpBackend::new(cfg.clone()).map_err(|e| invalid(e.to_string()))?)),
            }
        };
        let host_backend = backend_for(Role::Host, &self.backends.host)?;
        let manager_backend = backend_for(Role::Manager, &self.backends.manager)?;
        let worker_backend = backend_for(Role::Worker, &self.backends.worker)?;

        let worker_cfg = WorkerConfig {
            max_tool_turns: self.worker.max_tool_turns,
            tool_retry_limit: self.worker.tool_retry_limit,
            trace_dir: self.worker.trace_dir.as_ref().map(|d| self.resolve(d)),
        };
        let sched_cfg = SchedulerConfig {
            budget: self.scheduler.budget,
            subtask_timeout_secs: self.scheduler.subtask_timeout_secs,
            clock: self.scheduler.clock,
        };

        let mut registry = ManagerRegistry::new();
        let mut durations = Vec::new();
        let mut mock_servers = BTreeMap::new();
        for spec in &self.managers {
            let transport = match &spec.tools {
                ToolsSpec::Mock { fixture, sentinels } => {
                    let path = self.resolve(fixture);
                    let mut fx = MockFixture::load(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                    if let Some(s) = sentinels {
                        fx.sentinels = *s;
                    }
                    let server = MockToolServer::new(fx);
                    let t = server.connect();
                    mock_servers.insert(spec.id.clone(), server);
                    t
                }
                ToolsSpec::Stdio { command, args } => Transport::stdio(command, args).map_err(|e| invalid(e.to_string()))?,
            };
            let client = McpClient::initialize(transport)
                .await
                .map_err(|e| invalid(format!("manager `{}` tools: {e}", spec.id)))?;
            let model = Arc::new(DurationTable::new(&spec.id, self.scheduler.durations.clone()));
            durations.push(model.clone());
            let scheduler = Arc::new(Scheduler::new(sched_cfg.clone()).with_durations(model));
            let mcfg = ManagerConfig {
                id: crate::domain::ManagerId::new(spec.id.as_str()),
                domain: spec.domain.clone(),
                capability: spec.capability.clone(),
                decompose_cap: spec.decompose_cap,
                reflect_limit: spec.reflect_limit,
                escalation_markers: spec.escalation_markers.clone(),
            };
            let manager = Manager::new(
                mcfg,
                manager_backend.clone(),
                worker_backend.clone(),
                Arc::new(client),
                scheduler,
                worker_cfg.clone(),
                templates.clone(),
            );
            registry.register(Arc::new(manager)).map_err(|e| invalid(e.to_string()))?;
        }

        let host = Host::new(
            HostConfig {
                step_limit: self.host.step_limit,
                reprompt_limit: self.host.reprompt_limit,
            },
            host_backend,
            templates,
        );
        Ok(Engine {
            host,
            registry,
            clock: self.scheduler.clock,
            trace_path: self.trace.as_ref().map(|p| self.resolve(p)),
            scripted,
            durations,
            mock_servers,
        })
    }
}

/// Virtual durations looked up by `manager:step:slot:revision`, then
/// `manager:step:slot`, `manager:step`, `manager`, then `default`.
pub struct DurationTable {
    manager: String,
    table: BTreeMap<String, f64>,
    misses: Mutex<Vec<String>>,
}

impl DurationTable {
    pub fn new(manager: &str, table: BTreeMap<String, f64>) -> Self {
        Self {
            manager: manager.to_string(),
            table,
            misses: Mutex::new(Vec::new()),
        }
    }

    pub fn lookup(&self, st: &Subtask) -> Option<f64> {
        let m = &self.manager;
        [
            format!("{m}:{}:{}:{}", st.step_index, st.slot, st.revision),
            format!("{m}:{}:{}", st.step_index, st.slot),
            format!("{m}:{}", st.step_index),
            m.clone(),
            "default".to_string(),
        ]
        .iter()
        .find_map(|k| self.table.get(k).copied())
    }

    /// Subtasks that had no matching entry and ran with zero duration.
    pub fn misses(&self) -> Vec<String> {
        self.misses.lock().unwrap().clone()
    }
}

impl DurationModel for DurationTable {
    fn duration_of(&self, st: &Subtask) -> f64 {
        self.lookup(st).unwrap_or_else(|| {
            self.misses.lock().unwrap().push(format!(
                "{}:{}:{}:{}",
                self.manager, st.step_index, st.slot, st.revision
            ));
            0.0
        })
    }
}

/// A host, its managers and the bindings they were built from.
pub struct Engine {
    pub host: Host,
    pub registry: ManagerRegistry,
    pub clock: ClockMode,
    pub trace_path: Option<PathBuf>,
    scripted: BTreeMap<&'static str, Arc<ScriptedBackend>>,
    durations: Vec<Arc<DurationTable>>,
    mock_servers: BTreeMap<String, MockToolServer>,
}

impl Engine {
    pub fn new_tracer(&self) -> Result<Tracer, TelemetryError> {
        let clock = match self.clock {
            ClockMode::Virtual => Clock::virtual_at_zero(),
            ClockMode::Wall => Clock::wall(),
        };
        match &self.trace_path {
            Some(p) => Tracer::with_file(clock, p),
            None => Ok(Tracer::in_memory(clock)),
        }
    }

    pub async fn run(&self, query: TaskQuery) -> Result<TaskRun, TaskFailed> {
        let tracer = self.new_tracer().map_err(|e| TaskFailed {
            cause: e.into(),
            trace: TraceHandle {
                events: Vec::new(),
                path: self.trace_path.clone(),
            },
        })?;
        self.host.run_task(query, &self.registry, &tracer).await
    }

    /// The scripted backend bound to `role`, if any.
    pub fn scripted_backend(&self, role: Role) -> Option<Arc<ScriptedBackend>> {
        self.scripted.get(role.as_str()).cloned()
    }

    pub fn mock_server(&self, manager: &str) -> Option<&MockToolServer> {
        self.mock_servers.get(manager)
    }

    pub fn duration_misses(&self) -> Vec<String> {
        self.durations.iter().flat_map(|d| d.misses()).collect()
    }

    /// Script keys with responses left over, across all scripted backends.
    pub fn unconsumed_script_keys(&self) -> Vec<String> {
        let mut seen: Vec<*const ScriptedBackend> = Vec::new();
        let mut keys = Vec::new();
        for b in self.scripted.values() {
            let ptr = Arc::as_ptr(b);
            if !seen.contains(&ptr) {
                seen.push(ptr);
                keys.extend(b.unconsumed());
            }
        }
        keys.sort();
        keys
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    const BASE: &str = r#"
        [scheduler]
        clock = "virtual"
        [scheduler.durations]
        default = 2.0
        "search:1:0" = 5.0
        [backends.host]
        kind = "scripted"
        script = "script.json"
        [backends.manager]
        kind = "scripted"
        script = "script.json"
        [backends.worker]
        kind = "scripted"
        script = "script.json"
        [[managers]]
        id = "search"
        domain = "web search"
        capability = "searches the web"
        tools = { kind = "mock", fixture = "tools.json" }
    "#;

    fn setup() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "script.json", "{}");
        write(dir.path(), "tools.json", r#"{"tools":[{"name":"web_search"}]}"#);
        dir
    }

    #[test]
    fn defaults_and_paths() {
        let dir = setup();
        let cfg = EngineConfig::from_toml_str(BASE, dir.path()).unwrap();
        assert_eq!(cfg.host.step_limit, 12);
        assert_eq!(cfg.host.reprompt_limit, 1);
        assert_eq!(cfg.scheduler.budget, 8);
        assert_eq!(cfg.worker.max_tool_turns, 12);
        assert_eq!(cfg.managers[0].reflect_limit, 3);
        assert_eq!(cfg.resolve(Path::new("script.json")), dir.path().join("script.json"));
    }

    #[test]
    fn zero_steps_rejected() {
        let dir = setup();
        let mut cfg = EngineConfig::from_toml_str(BASE, dir.path()).unwrap();
        let err = cfg
            .apply(&Overrides {
                max_steps: Some(0),
                ..Overrides::default()
            })
            .unwrap_err();
        assert!(err.to_string().contains("step_limit"));
    }

    #[test]
    fn missing_script_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "tools.json", "{}");
        assert!(matches!(EngineConfig::from_toml_str(BASE, dir.path()), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = setup();
        let text = BASE.replace("[scheduler]", "[scheduler]\nworkers = 3");
        assert!(EngineConfig::from_toml_str(&text, dir.path()).is_err());
    }

    #[test]
    fn duration_lookup_order() {
        let table: BTreeMap<String, f64> = [("search:1:0".to_string(), 5.0), ("default".to_string(), 2.0), ("search:1:0:1".to_string(), 7.0)]
            .into_iter()
            .collect();
        let d = DurationTable::new("search", table);
        let st = |slot, revision| Subtask {
            text: "x".into(),
            step_index: 1,
            slot,
            revision,
        };
        assert_eq!(d.duration_of(&st(0, 0)), 5.0);
        assert_eq!(d.duration_of(&st(0, 1)), 7.0);
        assert_eq!(d.duration_of(&st(1, 0)), 2.0);
        let bare = DurationTable::new("search", BTreeMap::new());
        assert_eq!(bare.duration_of(&st(0, 0)), 0.0);
        assert_eq!(bare.misses(), vec!["search:1:0:0".to_string()]);
    }

    #[tokio::test]
    async fn builds_and_shares_script() {
        let dir = setup();
        let cfg = EngineConfig::from_toml_str(BASE, dir.path()).unwrap();
        let engine = cfg.build().await.unwrap();
        assert_eq!(engine.registry.len(), 1);
        let h = engine.scripted_backend(Role::Host).unwrap();
        let w = engine.scripted_backend(Role::Worker).unwrap();
        assert!(Arc::ptr_eq(&h, &w));
    }
}
