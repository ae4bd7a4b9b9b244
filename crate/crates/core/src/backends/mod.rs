//! Completion backends shared by the host, manager and worker tiers.
//!
//! [`ScriptedBackend`] replays a key-indexed response table for tests and
//! simulation; [`HttpBackend`] talks to a chat-completions style endpoint.
//! Both enforce a pre-flight token ceiling.

mod http;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{match_key, ScriptTable, ScriptedBackend};

/// Provider limit observed in practice; requests above it are refused.
pub const DEFAULT_TOKEN_CEILING: u64 = 272_000;

/// Characters per token for the offline estimator.
pub const CHARS_PER_TOKEN: u64 = 4;

/// Parameter names a request may carry.
pub const ALLOWED_PARAMS: &[&str] = &["temperature", "max_tokens", "top_p"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Host,
    Manager,
    Worker,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Host => "host",
            Role::Manager => "manager",
            Role::Worker => "worker",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role: Role,
    pub system_prompt: String,
    pub transcript: Vec<Turn>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Explicit script keys, most specific first. Live backends ignore them.
    #[serde(default)]
    pub routes: Vec<String>,
}

impl CompletionRequest {
    pub fn new(role: Role, system_prompt: impl Into<String>, transcript: Vec<Turn>) -> Self {
        Self {
            role,
            system_prompt: system_prompt.into(),
            transcript,
            params: BTreeMap::new(),
            routes: Vec::new(),
        }
    }

    pub fn with_routes<I, S>(mut self, routes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.routes = routes.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.transcript.is_empty() {
            return Err(BackendError::InvalidRequest("empty transcript".into()));
        }
        if let Some(bad) = self.params.keys().find(|k| !ALLOWED_PARAMS.contains(&k.as_str())) {
            return Err(BackendError::InvalidRequest(format!("unknown parameter `{bad}`")));
        }
        Ok(())
    }

    /// Everything sent to the model, concatenated.
    pub fn rendered(&self) -> String {
        let mut out = self.system_prompt.clone();
        for turn in &self.transcript {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&turn.text);
        }
        out
    }

    pub fn prompt_tokens(&self) -> u64 {
        estimate_tokens(&self.system_prompt)
            + self.transcript.iter().map(|t| estimate_tokens(&t.text)).sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("TokenLimitExceeded: prompt of {tokens} tokens exceeds limit of {limit}")]
    TokenLimitExceeded { tokens: u64, limit: u64 },
    #[error("script exhausted for key `{0}`")]
    ScriptExhausted(String),
    #[error("no script entry for any of: {0:?}")]
    NoScript(Vec<String>),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Short stable name used in trace payloads.
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Unavailable(_) => "BackendUnavailable",
            BackendError::TokenLimitExceeded { .. } => "TokenLimitExceeded",
            BackendError::ScriptExhausted(_) => "ScriptExhausted",
            BackendError::NoScript(_) => "NoScript",
            BackendError::InvalidRequest(_) => "InvalidRequest",
        }
    }
}

#[async_trait]
pub trait CompletionBackend: Send + Sync {
    async fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError>;

    fn name(&self) -> &str;
}

/// `ceil(chars / 4)`; zero only for the empty string.
pub fn estimate_tokens(text: &str) -> u64 {
    let chars = text.chars().count() as u64;
    chars.div_ceil(CHARS_PER_TOKEN)
}

/// Refuses requests whose rendered prompt is above `ceiling`.
pub fn check_token_ceiling(req: &CompletionRequest, ceiling: u64) -> Result<u64, BackendError> {
    let tokens = req.prompt_tokens();
    if tokens > ceiling {
        return Err(BackendError::TokenLimitExceeded {
            tokens,
            limit: ceiling,
        });
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_zero_tokens() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("a"), 1);
    }

    #[test]
    fn four_thousand_chars() {
        let text = "x".repeat(4000);
        // 4000 / 4 with the chosen divisor.
        let est = estimate_tokens(&text);
        assert_eq!(est, 1000);
        assert!((500..=2000).contains(&est));
    }

    #[test]
    fn counts_chars_not_bytes() {
        assert_eq!(estimate_tokens("唐代宗李"), 1);
    }

    #[test]
    fn request_validation() {
        let ok = CompletionRequest::new(Role::Host, "sys", vec![Turn::new("user", "hi")])
            .with_param("temperature", 1.0);
        assert!(ok.validate().is_ok());
        let empty = CompletionRequest::new(Role::Host, "sys", vec![]);
        assert!(matches!(empty.validate(), Err(BackendError::InvalidRequest(_))));
        let bad = ok.clone().with_param("seed", 3.0);
        assert!(matches!(bad.validate(), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn ceiling_check() {
        let req = CompletionRequest::new(Role::Worker, "", vec![Turn::new("user", "y".repeat(41))]);
        assert_eq!(check_token_ceiling(&req, 11).unwrap(), 11);
        assert_eq!(
            check_token_ceiling(&req, 10).unwrap_err(),
            BackendError::TokenLimitExceeded { tokens: 11, limit: 10 }
        );
    }

    proptest! {
        #[test]
        fn estimate_is_monotone(s in ".{0,64}", t in ".{0,64}") {
            let joined = format!("{s}{t}");
            prop_assert!(estimate_tokens(&joined) >= estimate_tokens(&s));
            if !s.is_empty() {
                prop_assert!(estimate_tokens(&s) >= 1);
            }
        }
    }
}
