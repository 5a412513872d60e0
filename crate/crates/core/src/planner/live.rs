//! HTTP chat-completion backends.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatRequest, Completion, PlannerBackend, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    /// `POST {base}/chat/completions` with bearer auth.
    OpenAi,
    /// `POST {base}/v1/messages` with `x-api-key` auth.
    Anthropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub provider: Provider,
    pub model: String,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_ms: u64,
    /// Additional attempts after the first on timeouts, 429 and 5xx.
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            provider: Provider::OpenAi,
            model: "gpt-4o".to_string(),
            base_url: "https://api.openai.com/v1".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

impl LiveConfig {
    pub fn anthropic(model: &str) -> Self {
        Self {
            provider: Provider::Anthropic,
            model: model.to_string(),
            base_url: "https://api.anthropic.com".to_string(),
            api_key_env: "ANTHROPIC_API_KEY".to_string(),
            ..Self::default()
        }
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    /// Reads the API key from the configured environment variable.
    pub fn from_env(config: LiveConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| BackendError::KeyMissing(config.api_key_env.clone()))?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: LiveConfig, api_key: String) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({"role": role, "content": m.content})
            })
            .collect();
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    fn attempt(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let base = self.config.base_url.trim_end_matches('/');
        let builder = match self.config.provider {
            Provider::OpenAi => self
                .client
                .post(format!("{base}/chat/completions"))
                .bearer_auth(&self.api_key),
            Provider::Anthropic => self
                .client
                .post(format!("{base}/v1/messages"))
                .header("x-api-key", &self.api_key)
                .header("anthropic-version", "2023-06-01"),
        };
        let start = Instant::now();
        let resp = builder.json(&self.body(request)).send().map_err(map_transport)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::HttpStatus(status.as_u16()));
        }
        let body: Value = resp.json().map_err(map_transport)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1000.0;
        let (text, tokens) = match self.config.provider {
            Provider::OpenAi => (
                body.pointer("/choices/0/message/content").and_then(Value::as_str),
                body.pointer("/usage/total_tokens").and_then(Value::as_u64),
            ),
            Provider::Anthropic => (
                body.pointer("/content/0/text").and_then(Value::as_str),
                match (
                    body.pointer("/usage/input_tokens").and_then(Value::as_u64),
                    body.pointer("/usage/output_tokens").and_then(Value::as_u64),
                ) {
                    (Some(i), Some(o)) => Some(i + o),
                    _ => None,
                },
            ),
        };
        let text = text.ok_or_else(|| BackendError::BadResponse("no message text".to_string()))?;
        Ok(Completion {
            text: text.to_string(),
            latency_ms: Some(latency_ms),
            tokens,
        })
    }
}

fn map_transport(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else if e.is_decode() {
        BackendError::BadResponse(e.to_string())
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Timeout | BackendError::Transport(_) => true,
        BackendError::HttpStatus(code) => *code == 429 || *code >= 500,
        _ => false,
    }
}

impl PlannerBackend for LiveBackend {
    fn label(&self) -> String {
        format!("{:?}:{}", self.config.provider, self.config.model).to_lowercase()
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok(c) => return Ok(c),
                Err(e) if retryable(&e) && attempts <= self.config.max_retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(10));
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(e) if retryable(&e) && self.config.max_retries > 0 => {
                    return Err(BackendError::RetriesExhausted {
                        attempts,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}
