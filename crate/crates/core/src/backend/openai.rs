use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Semaphore;

use super::{
    normalize_alternatives, BackendConfig, BackendError, ChatBackend, ChatRequest, ChatResponse,
    TokenAlternative, Usage,
};

/// Client for an OpenAI-compatible chat completions endpoint.
///
/// At most `max_in_flight` requests (including their retries) are outstanding
/// at once, no matter how many tasks share the client.
pub struct OpenAiBackend {
    config: BackendConfig,
    url: String,
    api_key: Option<String>,
    http: reqwest::Client,
    permits: Arc<Semaphore>,
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("url", &self.url)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

impl OpenAiBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(OpenAiBackend {
            url: config.completions_url(),
            permits: Arc::new(Semaphore::new(config.max_in_flight)),
            config,
            api_key,
            http,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut messages = Vec::with_capacity(2);
        if !request.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": request.user_prompt}));
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
        });
        if request.top_logprobs > 0 {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(request.top_logprobs);
        }
        body
    }

    async fn attempt(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut builder = self.http.post(&self.url).json(&self.body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(map_reqwest)?;
        let status = response.status();
        let text = response.text().await.map_err(map_reqwest)?;
        if !status.is_success() {
            if is_context_length(status.as_u16(), &text) {
                return Err(BackendError::ContextLength(truncate_body(&text)));
            }
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: truncate_body(&text),
            });
        }
        parse_response(&text, request.top_logprobs)
    }
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    fn model(&self) -> &str {
        &self.config.model
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| BackendError::Config("client closed".into()))?;
        let policy = &self.config.retry;
        let mut attempt = 1;
        loop {
            match self.attempt(request).await {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() && attempt < policy.max_attempts => {
                    log::debug!("attempt {attempt} against {} failed: {e}", self.url);
                    tokio::time::sleep(policy.delay(attempt)).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn map_reqwest(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else if e.is_decode() {
        BackendError::Malformed(e.to_string())
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn truncate_body(body: &str) -> String {
    const LIMIT: usize = 512;
    match body.char_indices().nth(LIMIT) {
        Some((i, _)) => format!("{}…", &body[..i]),
        None => body.to_string(),
    }
}

fn is_context_length(status: u16, body: &str) -> bool {
    if !matches!(status, 400 | 413 | 422) {
        return false;
    }
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded")
        || lower.contains("maximum context length")
        || lower.contains("context length")
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireTokenLogprob>>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireTop>,
}

#[derive(Deserialize)]
struct WireTop {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub(crate) fn parse_response(body: &str, top_logprobs: u8) -> Result<ChatResponse, BackendError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Malformed("response has no choices".into()))?;
    let mut alternatives = Vec::new();
    if top_logprobs > 0 {
        if let Some(first) = choice
            .logprobs
            .and_then(|l| l.content)
            .and_then(|c| c.into_iter().next())
        {
            alternatives = first
                .top_logprobs
                .into_iter()
                .map(|t| TokenAlternative {
                    token: t.token,
                    logprob: t.logprob,
                })
                .collect::<Vec<_>>();
            if !alternatives.iter().any(|a| a.token == first.token) {
                alternatives.push(TokenAlternative {
                    token: first.token,
                    logprob: first.logprob,
                });
            }
        }
    }
    let usage = wire
        .usage
        .map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        })
        .unwrap_or_default();
    Ok(ChatResponse {
        text: choice.message.content.unwrap_or_default(),
        first_token_alternatives: normalize_alternatives(alternatives, usize::from(top_logprobs)),
        usage,
    })
}
