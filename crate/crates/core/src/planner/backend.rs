use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse_plan, parse_plan_strict, validate_plan, ActionPlan, PromptParts, RunLedger};
use crate::gridworld::{BuildState, GridWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A planner request. `messages` is what goes over the wire; `prompt` keeps the
/// structured sections for backends that answer from them directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: PromptParts,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Caller-chosen key, e.g. `prompt_id/trial`.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(prompt: PromptParts, tag: impl Into<String>) -> Self {
        let messages = vec![ChatMessage::user(prompt.render())];
        Self {
            prompt,
            messages,
            temperature: 0.0,
            max_tokens: 1024,
            tag: tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Backend-reported latency; `None` when the backend does not measure it.
    pub latency_ms: Option<f64>,
    /// Total tokens billed, when the provider reports usage.
    pub tokens: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            latency_ms: None,
            tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("provider returned HTTP {0}")]
    HttpStatus(u16),
    #[error("API key environment variable `{0}` is not set")]
    KeyMissing(String),
    #[error("gave up after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("no design registered for `{request}`; available: {}", available.join(", "))]
    UnknownDesign {
        request: String,
        available: Vec<String>,
    },
}

/// Anything that can turn a prompt into raw planner text.
///
/// Implementations must tolerate concurrent calls; the evaluation harness fans
/// trials out across threads.
pub trait PlannerBackend: Send + Sync {
    fn label(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError>;
}

/// Send one request and return the full response text.
pub fn request_plan(
    backend: &dyn PlannerBackend,
    request: &ChatRequest,
) -> Result<Completion, BackendError> {
    backend.complete(request)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Corrective reprompts allowed after a malformed or invalid plan.
    pub max_corrections: usize,
    /// Require the response to be the bare JSON object.
    pub strict_json: bool,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            max_corrections: 2,
            strict_json: false,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: ActionPlan,
    /// Requests sent, including corrective ones.
    pub requests: usize,
    pub raw: String,
    pub latency_ms: Option<f64>,
    pub tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("planner backend failed: {source}")]
    Backend {
        source: BackendError,
        requests: usize,
    },
    #[error("plan rejected after {requests} requests: {reason}")]
    Rejected { reason: String, requests: usize },
}

impl PlanError {
    pub fn requests(&self) -> usize {
        match self {
            PlanError::Backend { requests, .. } | PlanError::Rejected { requests, .. } => *requests,
        }
    }
}

/// Requests, parses and validates plans, issuing corrective reprompts that
/// quote the exact problem when a response is unusable.
pub struct Planner<'a> {
    backend: &'a dyn PlannerBackend,
    ledger: Option<&'a RunLedger>,
    config: PlannerConfig,
}

impl<'a> Planner<'a> {
    pub fn new(backend: &'a dyn PlannerBackend, config: PlannerConfig) -> Self {
        Self {
            backend,
            ledger: None,
            config,
        }
    }

    pub fn with_ledger(mut self, ledger: &'a RunLedger) -> Self {
        self.ledger = Some(ledger);
        self
    }

    pub fn backend(&self) -> &dyn PlannerBackend {
        self.backend
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn plan(
        &self,
        prompt: &PromptParts,
        state: &BuildState,
        grid: &GridWorld,
        tag: &str,
    ) -> Result<PlanOutcome, PlanError> {
        let mut request = ChatRequest::new(prompt.clone(), tag);
        request.temperature = self.config.temperature;
        request.max_tokens = self.config.max_tokens;
        let mut requests = 0;
        loop {
            requests += 1;
            let completion = match request_plan(self.backend, &request) {
                Ok(c) => c,
                Err(source) => {
                    self.log(&request, "", &format!("backend error: {source}"));
                    return Err(PlanError::Backend { source, requests });
                }
            };
            let parsed = if self.config.strict_json {
                parse_plan_strict(&completion.text, grid)
            } else {
                parse_plan(&completion.text, grid)
            };
            let problem = match parsed {
                Ok(plan) => match validate_plan(&plan, state) {
                    Ok(()) => {
                        self.log(&request, &completion.text, "ok");
                        return Ok(PlanOutcome {
                            plan,
                            requests,
                            raw: completion.text,
                            latency_ms: completion.latency_ms,
                            tokens: completion.tokens,
                        });
                    }
                    Err(v) => v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
                },
                Err(e) => e.to_string(),
            };
            self.log(&request, &completion.text, &format!("rejected: {problem}"));
            if requests > self.config.max_corrections {
                return Err(PlanError::Rejected {
                    reason: problem,
                    requests,
                });
            }
            request.messages.push(ChatMessage::assistant(completion.text));
            request.messages.push(ChatMessage::user(format!(
                "Your previous response could not be used: {problem}. \
                 Reply again with only a JSON object that follows the Output Schema and the Rules."
            )));
        }
    }

    fn log(&self, request: &ChatRequest, raw: &str, result: &str) {
        if let Some(ledger) = self.ledger {
            ledger.record(&request.tag, &request.messages, raw, result);
        }
    }
}
