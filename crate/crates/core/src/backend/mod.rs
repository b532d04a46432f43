//! Chat-completion backends.
//!
//! [`OpenAiBackend`] talks to any OpenAI-compatible `/v1/chat/completions`
//! endpoint and reads the first generated token's top-logprob alternatives.
//! [`ScriptedBackend`] answers from a fixed script and never touches the
//! network; it makes whole runs reproducible offline.

mod openai;
mod scripted;

pub use openai::OpenAiBackend;
pub use scripted::{ScriptFile, ScriptRule, ScriptRuleFile, ScriptedBackend, ScriptedFailure};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

/// Largest `top_logprobs` accepted by the OpenAI wire protocol.
pub const MAX_TOP_LOGPROBS: u8 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    /// Number of first-token alternatives to return; 0 disables logprobs.
    pub top_logprobs: u8,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is not a non-negative number",
                self.temperature
            )));
        }
        if self.top_logprobs > MAX_TOP_LOGPROBS {
            return Err(BackendError::InvalidRequest(format!(
                "top_logprobs {} exceeds {MAX_TOP_LOGPROBS}",
                self.top_logprobs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAlternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Sorted by logprob, most likely first; every logprob is ≤ 0.
    pub first_token_alternatives: Vec<TokenAlternative>,
    pub usage: Usage,
}

/// Sort alternatives most-likely first, clamp positive logprobs (rounding
/// noise from some servers) to 0 and keep at most `limit`.
pub(crate) fn normalize_alternatives(
    mut alts: Vec<TokenAlternative>,
    limit: usize,
) -> Vec<TokenAlternative> {
    for a in &mut alts {
        if a.logprob > 0.0 {
            a.logprob = 0.0;
        }
    }
    alts.retain(|a| !a.logprob.is_nan());
    alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.token.cmp(&b.token)));
    alts.truncate(limit);
    alts
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("prompt exceeds the model context length: {0}")]
    ContextLength(String),
    #[error("no script rule matches the prompt")]
    NoScriptMatch,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether another attempt may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) | BackendError::Malformed(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Model identifier recorded alongside every artifact this backend produces.
    fn model(&self) -> &str;

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl std::fmt::Debug for dyn ChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ChatBackend({})", self.model())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    /// Delay before retry `n` is `backoff_base_ms · 2^(n-1)`.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_max_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_in_flight() -> usize {
    8
}

fn default_timeout() -> f64 {
    120.0
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: default_max_attempts(),
            backoff_base_ms: default_backoff_ms(),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> std::time::Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        std::time::Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Server base URL (`http://host:port`, `.../v1`) or the full completions URL.
    pub endpoint: String,
    /// Passed through verbatim as the request's `model`.
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(flatten, default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        BackendConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("max_attempts must be at least 1".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(BackendError::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }

    /// Full `/v1/chat/completions` URL for the configured endpoint.
    pub fn completions_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}
