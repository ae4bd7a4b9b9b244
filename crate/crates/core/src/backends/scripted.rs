//! Deterministic backend that replays scripted responses.
//!
//! A script is a JSON object mapping keys to ordered response lists:
//!
//! ```json
//! {
//!   "host:plan": ["{\"kind\":\"STOP\"}"],
//!   "search:worker:1:0:0": ["{\"tool\":\"web_search\",\"arguments\":{\"query\":\"x\"}}", "done"]
//! }
//! ```
//!
//! Lookup tries the content key `role:<sha256 prefix of last transcript entry>`
//! first, then each of the request's explicit routes. The first key present in
//! the table is consumed; an exhausted key is an error.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use async_trait::async_trait;
use sha2::{Digest, Sha256};

use super::{
    check_token_ceiling, estimate_tokens, BackendError, Completion, CompletionBackend,
    CompletionRequest, DEFAULT_TOKEN_CEILING,
};

const HASH_PREFIX_LEN: usize = 12;

/// Content-derived script key for a request.
pub fn match_key(req: &CompletionRequest) -> String {
    let last = req.transcript.last().map(|t| t.text.as_str()).unwrap_or("");
    let digest = hex::encode(Sha256::digest(last.as_bytes()));
    format!("{}:{}", req.role.as_str(), &digest[..HASH_PREFIX_LEN])
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptTable {
    entries: BTreeMap<String, Vec<String>>,
}

impl ScriptTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: BTreeMap<String, Vec<String>>) -> Self {
        Self { entries }
    }

    pub fn push(&mut self, key: impl Into<String>, response: impl Into<String>) -> &mut Self {
        self.entries.entry(key.into()).or_default().push(response.into());
        self
    }

    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self {
            entries: serde_json::from_str(text)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("string map serializes")
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<String>> {
        &self.entries
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }
}

pub struct ScriptedBackend {
    table: ScriptTable,
    cursors: Mutex<HashMap<String, usize>>,
    log: Mutex<Vec<CompletionRequest>>,
    token_ceiling: u64,
}

impl ScriptedBackend {
    pub fn new(table: ScriptTable) -> Self {
        Self {
            table,
            cursors: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
            token_ceiling: DEFAULT_TOKEN_CEILING,
        }
    }

    pub fn with_token_ceiling(mut self, ceiling: u64) -> Self {
        self.token_ceiling = ceiling;
        self
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().unwrap().clone()
    }

    /// Keys with responses left unconsumed.
    pub fn unconsumed(&self) -> Vec<String> {
        let cursors = self.cursors.lock().unwrap();
        self.table
            .entries
            .iter()
            .filter(|(k, v)| cursors.get(*k).copied().unwrap_or(0) < v.len())
            .map(|(k, _)| k.clone())
            .collect()
    }

    fn next_for(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let mut candidates = Vec::with_capacity(req.routes.len() + 1);
        candidates.push(match_key(req));
        candidates.extend(req.routes.iter().cloned());
        let key = candidates
            .iter()
            .find(|k| self.table.contains_key(k))
            .ok_or_else(|| BackendError::NoScript(candidates.clone()))?;
        let responses = &self.table.entries[key];
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(key.clone()).or_insert(0);
        let text = responses
            .get(*cursor)
            .cloned()
            .ok_or_else(|| BackendError::ScriptExhausted(key.clone()))?;
        *cursor += 1;
        Ok(text)
    }
}

#[async_trait]
impl CompletionBackend for ScriptedBackend {
    async fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        self.log.lock().unwrap().push(req.clone());
        let prompt_tokens = check_token_ceiling(req, self.token_ceiling)?;
        let text = self.next_for(req)?;
        Ok(Completion {
            completion_tokens: estimate_tokens(&text),
            prompt_tokens,
            text,
        })
    }

    fn name(&self) -> &str {
        "scripted"
    }
}
