use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    normalize_alternatives, BackendError, ChatBackend, ChatRequest, ChatResponse, TokenAlternative,
    Usage,
};

/// Failure a script rule can inject instead of a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    ContextLength,
    Transport,
    Timeout,
}

#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub pattern: Regex,
    pub text: String,
    pub alternatives: Vec<TokenAlternative>,
    pub delay: Duration,
    pub failure: Option<ScriptedFailure>,
}

/// On-disk form of a script (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptFile {
    pub model: String,
    /// Prompts longer than this many characters fail with a context-length error.
    #[serde(default)]
    pub context_limit_chars: Option<usize>,
    pub rules: Vec<ScriptRuleFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRuleFile {
    /// Regular expression searched in `system_prompt + "\n\n" + user_prompt`.
    pub pattern: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub top_logprobs: Vec<TokenAlternative>,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default)]
    pub error: Option<ScriptedFailure>,
}

/// Deterministic backend answering from an ordered rule list.
///
/// The first rule whose pattern matches the prompt wins. A prompt that no rule
/// matches is an error, never a default reply.
#[derive(Debug)]
pub struct ScriptedBackend {
    model: String,
    rules: Vec<ScriptRule>,
    context_limit_chars: Option<usize>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(model: impl Into<String>) -> Self {
        ScriptedBackend {
            model: model.into(),
            rules: Vec::new(),
            context_limit_chars: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    /// Append a rule. Panics on an invalid pattern; use [`ScriptedBackend::from_script`]
    /// for untrusted input.
    pub fn rule(mut self, pattern: &str, text: &str, alternatives: &[(&str, f64)]) -> Self {
        self.rules.push(ScriptRule {
            pattern: Regex::new(pattern).expect("invalid script pattern"),
            text: text.to_string(),
            alternatives: alternatives
                .iter()
                .map(|(t, l)| TokenAlternative {
                    token: t.to_string(),
                    logprob: *l,
                })
                .collect(),
            delay: Duration::ZERO,
            failure: None,
        });
        self
    }

    pub fn failing_rule(mut self, pattern: &str, failure: ScriptedFailure) -> Self {
        self.rules.push(ScriptRule {
            pattern: Regex::new(pattern).expect("invalid script pattern"),
            text: String::new(),
            alternatives: Vec::new(),
            delay: Duration::ZERO,
            failure: Some(failure),
        });
        self
    }

    /// Give the most recently added rule a fixed reply delay.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        if let Some(last) = self.rules.last_mut() {
            last.delay = delay;
        }
        self
    }

    pub fn with_context_limit(mut self, chars: usize) -> Self {
        self.context_limit_chars = Some(chars);
        self
    }

    pub fn from_script(script: ScriptFile) -> Result<Self, BackendError> {
        let mut backend = ScriptedBackend::new(script.model);
        backend.context_limit_chars = script.context_limit_chars;
        for (i, r) in script.rules.into_iter().enumerate() {
            let pattern = Regex::new(&r.pattern)
                .map_err(|e| BackendError::Config(format!("script rule {}: {e}", i + 1)))?;
            backend.rules.push(ScriptRule {
                pattern,
                text: r.text,
                alternatives: r.top_logprobs,
                delay: Duration::from_millis(r.delay_ms),
                failure: r.error,
            });
        }
        Ok(backend)
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        let script: ScriptFile =
            serde_json::from_str(json).map_err(|e| BackendError::Config(format!("script: {e}")))?;
        Self::from_script(script)
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Number of `complete` calls so far, including failed ones.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously executing `complete` calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    fn find(&self, prompt: &str) -> Option<&ScriptRule> {
        self.rules.iter().find(|r| r.pattern.is_match(prompt))
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    fn model(&self) -> &str {
        &self.model
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let _guard = InFlight(&self.in_flight);

        request.validate()?;
        let prompt = format!("{}\n\n{}", request.system_prompt, request.user_prompt);
        if let Some(limit) = self.context_limit_chars {
            let len = prompt.chars().count();
            if len > limit {
                return Err(BackendError::ContextLength(format!(
                    "{len} characters exceeds the scripted limit of {limit}"
                )));
            }
        }
        let rule = self.find(&prompt).ok_or(BackendError::NoScriptMatch)?;
        if !rule.delay.is_zero() {
            tokio::time::sleep(rule.delay).await;
        } else {
            // Still yield so concurrent callers interleave like real I/O.
            tokio::task::yield_now().await;
        }
        match rule.failure {
            Some(ScriptedFailure::ContextLength) => {
                return Err(BackendError::ContextLength("scripted failure".into()))
            }
            Some(ScriptedFailure::Transport) => {
                return Err(BackendError::Transport("scripted failure".into()))
            }
            Some(ScriptedFailure::Timeout) => return Err(BackendError::Timeout),
            None => {}
        }
        Ok(ChatResponse {
            text: rule.text.clone(),
            first_token_alternatives: normalize_alternatives(
                rule.alternatives.clone(),
                usize::from(request.top_logprobs),
            ),
            usage: Usage {
                prompt_tokens: word_count(&prompt),
                completion_tokens: word_count(&rule.text),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str, top: u8) -> ChatRequest {
        ChatRequest {
            system_prompt: String::new(),
            user_prompt: user.into(),
            max_new_tokens: 1,
            temperature: 0.0,
            top_logprobs: top,
        }
    }

    #[tokio::test]
    async fn returns_reply_verbatim() {
        let b = ScriptedBackend::new("s").rule("Doc d1", "Yes", &[("Yes", -0.2231), ("No", -1.6094)]);
        let r = b.complete(&req("judge Doc d1 now", 5)).await.unwrap();
        assert_eq!(r.text, "Yes");
        assert_eq!(r.first_token_alternatives[0].token, "Yes");
        assert_eq!(r.first_token_alternatives[0].logprob, -0.2231);
        assert_eq!(r.first_token_alternatives[1].logprob, -1.6094);
    }

    #[tokio::test]
    async fn unmatched_prompt_is_an_error() {
        let b = ScriptedBackend::new("s").rule("Doc d1", "Yes", &[]);
        assert!(matches!(b.complete(&req("other", 5)).await, Err(BackendError::NoScriptMatch)));
        assert_eq!(b.call_count(), 1);
    }

    #[tokio::test]
    async fn earlier_rule_wins() {
        let b = ScriptedBackend::new("s").rule("Doc", "first", &[]).rule("Doc d1", "second", &[]);
        assert_eq!(b.complete(&req("Doc d1", 0)).await.unwrap().text, "first");
    }

    #[tokio::test]
    async fn respects_requested_alternative_count() {
        let alts: Vec<(&str, f64)> = (0..8).map(|i| (["a", "b", "c", "d", "e", "f", "g", "h"][i], -(i as f64))).collect();
        let b = ScriptedBackend::new("s").rule(".", "a", &alts);
        let r = b.complete(&req("x", 5)).await.unwrap();
        assert_eq!(r.first_token_alternatives.len(), 5);
        assert!(r
            .first_token_alternatives
            .windows(2)
            .all(|w| w[0].logprob >= w[1].logprob));
    }

    #[tokio::test]
    async fn identical_requests_give_identical_replies() {
        let b = ScriptedBackend::new("s").rule(".", "stable", &[("Yes", -0.1)]);
        let a = b.complete(&req("x", 5)).await.unwrap();
        let c = b.complete(&req("x", 5)).await.unwrap();
        assert_eq!(a, c);
    }

    #[tokio::test]
    async fn context_limit_and_injected_failures() {
        let b = ScriptedBackend::new("s")
            .failing_rule("boom", ScriptedFailure::Transport)
            .rule(".", "ok", &[])
            .with_context_limit(10);
        assert!(matches!(b.complete(&req("x".repeat(20).as_str(), 0)).await, Err(BackendError::ContextLength(_))));
        assert!(matches!(b.complete(&req("boom", 0)).await, Err(BackendError::Transport(_))));
        assert_eq!(b.complete(&req("fine", 0)).await.unwrap().text, "ok");
    }

    #[test]
    fn script_json_round() {
        let json = r#"{"model":"m","rules":[
            {"pattern":"Doc d1","text":"Yes","top_logprobs":[{"token":"Yes","logprob":-0.2}]},
            {"pattern":"(","text":"bad"}]}"#;
        assert!(matches!(ScriptedBackend::from_json(json), Err(BackendError::Config(_))));
        let ok = r#"{"model":"m","context_limit_chars":100,"rules":[{"pattern":"x","error":"context_length"}]}"#;
        let b = ScriptedBackend::from_json(ok).unwrap();
        assert_eq!(b.model(), "m");
        assert_eq!(b.rules[0].failure, Some(ScriptedFailure::ContextLength));
    }
}
