use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_token_ceiling, estimate_tokens, BackendError, Completion, CompletionBackend,
    CompletionRequest, DEFAULT_TOKEN_CEILING,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u64>,
    #[serde(default = "default_ceiling")]
    pub token_ceiling: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_ceiling() -> u64 {
    DEFAULT_TOKEN_CEILING
}

fn default_timeout() -> f64 {
    600.0
}

/// Chat-completions client. Request parameters override the configured
/// temperature and max_tokens.
pub struct HttpBackend {
    cfg: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Unavailable(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self { cfg, api_key, client })
    }

    pub fn request_body(&self, req: &CompletionRequest) -> Value {
        let mut messages = Vec::with_capacity(req.transcript.len() + 1);
        if !req.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": req.system_prompt}));
        }
        for turn in &req.transcript {
            let (role, content) = match turn.speaker.as_str() {
                "assistant" => ("assistant", turn.text.clone()),
                "system" => ("system", turn.text.clone()),
                "tool" => ("user", format!("Tool result:\n{}", turn.text)),
                _ => ("user", turn.text.clone()),
            };
            messages.push(json!({"role": role, "content": content}));
        }
        let temperature = req.params.get("temperature").copied().unwrap_or(self.cfg.temperature);
        let mut body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": temperature,
        });
        let max_tokens = req
            .params
            .get("max_tokens")
            .map(|v| *v as u64)
            .or(self.cfg.max_tokens);
        if let Some(max) = max_tokens {
            body["max_tokens"] = json!(max);
        }
        if let Some(top_p) = req.params.get("top_p") {
            body["top_p"] = json!(top_p);
        }
        body
    }
}

fn looks_like_token_limit(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded")
        || (lower.contains("tokens") && (lower.contains("exceed") || lower.contains("too long")))
}

#[async_trait]
impl CompletionBackend for HttpBackend {
    async fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let estimated = check_token_ceiling(req, self.cfg.token_ceiling)?;
        let mut builder = self.client.post(&self.cfg.endpoint).json(&self.request_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .await
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .text()
            .await
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if !status.is_success() {
            if looks_like_token_limit(&body) {
                return Err(BackendError::TokenLimitExceeded {
                    tokens: estimated,
                    limit: self.cfg.token_ceiling,
                });
            }
            return Err(BackendError::Unavailable(format!("HTTP {status}: {body}")));
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::Unavailable(format!("invalid response body: {e}")))?;
        let text = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Unavailable("response has no choices[0].message.content".into()))?
            .to_string();
        // Provider-reported usage wins over the estimate.
        let prompt_tokens = value
            .pointer("/usage/prompt_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(estimated);
        let completion_tokens = value
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or_else(|| estimate_tokens(&text));
        Ok(Completion {
            text,
            prompt_tokens,
            completion_tokens,
        })
    }

    fn name(&self) -> &str {
        &self.cfg.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Role, Turn};
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    use tokio::net::TcpListener;

    fn cfg(endpoint: String) -> HttpBackendConfig {
        HttpBackendConfig {
            endpoint,
            model: "test-model".into(),
            api_key_env: None,
            temperature: 1.0,
            max_tokens: Some(256),
            token_ceiling: DEFAULT_TOKEN_CEILING,
            timeout_secs: 5.0,
        }
    }

    /// Serves one canned HTTP response and hands back the raw request.
    async fn one_shot_server(status: &'static str, body: String) -> (String, tokio::task::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = tokio::spawn(async move {
            let (mut sock, _) = listener.accept().await.unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = sock.read(&mut chunk).await.unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf).to_string();
                if let Some(head_end) = text.find("\r\n\r\n") {
                    let len = text[..head_end]
                        .lines()
                        .find_map(|l| {
                            let l = l.to_ascii_lowercase();
                            l.strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap())
                        })
                        .unwrap_or(0);
                    if buf.len() >= head_end + 4 + len {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            let reply = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            sock.write_all(reply.as_bytes()).await.unwrap();
            String::from_utf8_lossy(&buf).to_string()
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    fn request() -> CompletionRequest {
        CompletionRequest::new(
            Role::Worker,
            "you are a worker",
            vec![Turn::new("user", "find it"), Turn::new("assistant", "{}"), Turn::new("tool", "payload")],
        )
    }

    #[test]
    fn body_shape() {
        let backend = HttpBackend::new(cfg("http://unused".into())).unwrap();
        let body = backend.request_body(&request().with_param("temperature", 0.5));
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["temperature"], 0.5);
        assert_eq!(body["max_tokens"], 256);
        let roles: Vec<&str> = body["messages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["role"].as_str().unwrap())
            .collect();
        assert_eq!(roles, vec!["system", "user", "assistant", "user"]);
    }

    #[tokio::test]
    async fn parses_choices_and_usage() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":42,"completion_tokens":7}}"#;
        let (url, server) = one_shot_server("200 OK", body.to_string()).await;
        let backend = HttpBackend::new(cfg(url)).unwrap();
        let c = backend.complete(&request()).await.unwrap();
        assert_eq!(c, Completion { text: "hello".into(), prompt_tokens: 42, completion_tokens: 7 });
        let raw = server.await.unwrap();
        assert!(raw.starts_with("POST /v1/chat/completions"));
        assert!(raw.contains("\"model\":\"test-model\""));
    }

    #[tokio::test]
    async fn provider_token_limit_maps_to_error() {
        let body = r#"{"error":{"message":"Input tokens exceed limit of 272000 tokens."}}"#;
        let (url, _server) = one_shot_server("400 Bad Request", body.to_string()).await;
        let backend = HttpBackend::new(cfg(url)).unwrap();
        assert!(matches!(
            backend.complete(&request()).await,
            Err(BackendError::TokenLimitExceeded { .. })
        ));
    }

    #[tokio::test]
    async fn server_error_is_unavailable() {
        let (url, _server) = one_shot_server("503 Service Unavailable", "{}".to_string()).await;
        let backend = HttpBackend::new(cfg(url)).unwrap();
        assert!(matches!(backend.complete(&request()).await, Err(BackendError::Unavailable(_))));
    }

    #[test]
    fn missing_key_variable() {
        let mut c = cfg("http://unused".into());
        c.api_key_env = Some("INFOSEEKER_TEST_DEFINITELY_UNSET".into());
        assert!(matches!(HttpBackend::new(c), Err(BackendError::Unavailable(_))));
    }
}
