//! Chat-completions transport.
//!
//! Request: `POST {base_url}/chat/completions` with
//! `{"model", "messages": [{"role", "content"}...], "temperature"}` and an
//! optional bearer token read from the environment. Response: the first
//! choice's `message.content`, plus `message.reasoning_content` (or
//! `message.reasoning`) when the provider returns reasoning separately, and
//! `usage` token counts when present.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompt::{parse_reply, render_prompt, HistoryWindow, PromptVariant};
use super::AgentError;
use crate::engine::SessionState;

fn default_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    120.0
}
fn default_concurrency() -> usize {
    4
}
fn default_backoff() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub history_window: HistoryWindow,
    /// Prompt size above which the full history falls back to a sliding window.
    #[serde(default)]
    pub char_budget: Option<usize>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Cap on requests in flight across all sessions sharing a client.
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
    /// Base delay between retries; attempt `k` waits `k * backoff_secs`.
    #[serde(default = "default_backoff")]
    pub backoff_secs: f64,
}

impl LlmEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        LlmEndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            temperature: 0.0,
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            history_window: HistoryWindow::Full,
            char_budget: None,
            api_key_env: None,
            max_concurrent: default_concurrency(),
            backoff_secs: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.base_url.is_empty() || self.model.is_empty() {
            return Err(AgentError::Config("base_url and model are required".into()));
        }
        if let HistoryWindow::Last(0) = self.history_window {
            return Err(AgentError::Config("history window must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) || !(self.timeout_secs > 0.0) || self.max_concurrent == 0 {
            return Err(AgentError::Config("temperature >= 0, timeout > 0 and max_concurrent >= 1 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub content: String,
    pub reasoning: Option<String>,
    pub usage: Option<TokenUsage>,
    pub attempts: u32,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<TokenUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    reasoning_content: Option<String>,
    #[serde(default)]
    reasoning: Option<String>,
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn acquire(self: &Arc<Self>) -> Permit {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self.clone())
    }
}

struct Permit(Arc<Limiter>);

impl Drop for Permit {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Blocking client; clones share the connection pool and the in-flight cap.
#[derive(Clone)]
pub struct LlmClient {
    config: LlmEndpointConfig,
    http: reqwest::blocking::Client,
    limiter: Arc<Limiter>,
    token: Option<String>,
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

impl LlmClient {
    pub fn new(config: LlmEndpointConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let _ = rustls::crypto::ring::default_provider().install_default();
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| AgentError::Config(e.to_string()))?;
        let token = config.api_key_env.as_deref().and_then(|var| std::env::var(var).ok());
        let limiter = Arc::new(Limiter { free: Mutex::new(config.max_concurrent), cv: Condvar::new() });
        Ok(LlmClient { config, http, limiter, token })
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    /// Same client at another sampling temperature.
    pub fn with_temperature(&self, temperature: f64) -> Self {
        let mut c = self.clone();
        c.config.temperature = temperature;
        c
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn send_once(&self, messages: &[ChatMessage]) -> Result<ChatReply, Failure> {
        let _permit = self.limiter.acquire();
        let body = ChatRequest { model: &self.config.model, messages, temperature: self.config.temperature };
        let mut req = self.http.post(self.endpoint()).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {}", text.chars().take(300).collect::<String>())));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| Failure::Retryable(format!("bad response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Failure::Retryable("response has no choices".into()))?;
        Ok(ChatReply {
            content: choice.message.content.unwrap_or_default(),
            reasoning: choice.message.reasoning_content.or(choice.message.reasoning),
            usage: parsed.usage,
            attempts: 0,
        })
    }

    /// Sends a chat request, retrying transport failures, 429 and 5xx up to
    /// `max_retries` times.
    pub fn chat(&self, messages: &[ChatMessage]) -> Result<ChatReply, AgentError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(messages) {
                Ok(mut reply) => {
                    reply.attempts = attempt;
                    return Ok(reply);
                }
                Err(Failure::Fatal(detail)) => return Err(AgentError::Transport { attempts: attempt, detail }),
                Err(Failure::Retryable(detail)) => {
                    if attempt > self.config.max_retries {
                        return Err(AgentError::Transport { attempts: attempt, detail });
                    }
                    log::warn!("chat request failed (attempt {attempt}): {detail}");
                    std::thread::sleep(Duration::from_secs_f64(self.config.backoff_secs * attempt as f64));
                }
            }
        }
    }

    /// Renders the session into a prompt, queries the endpoint and parses
    /// the reply. An unparseable reply is reported in the proposal rather
    /// than as an error.
    pub fn propose(&self, state: &SessionState, variant: PromptVariant) -> Result<LlmProposal, AgentError> {
        let bundle = render_prompt(state, variant, self.config.history_window, self.config.char_budget);
        let messages = vec![
            ChatMessage { role: "system".into(), content: bundle.system.clone() },
            ChatMessage { role: "user".into(), content: bundle.user_message() },
        ];
        let reply = self.chat(&messages)?;
        let (pair, parse_error) = match parse_reply(&reply.content, Some(state.graph())) {
            Ok(p) => (Some(p), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(LlmProposal {
            pair,
            raw_reply: reply.content,
            reasoning: reply.reasoning,
            usage: reply.usage,
            attempts: reply.attempts,
            parse_error,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmProposal {
    pub pair: Option<(String, String)>,
    pub raw_reply: String,
    pub reasoning: Option<String>,
    pub usage: Option<TokenUsage>,
    pub attempts: u32,
    pub parse_error: Option<String>,
}

impl LlmProposal {
    /// The record stored in a trial's `agent_meta`.
    pub fn meta_json(&self) -> serde_json::Value {
        let mut m = serde_json::json!({
            "raw_reply": self.raw_reply,
            "attempts": self.attempts,
        });
        if let Some(r) = &self.reasoning {
            m["reasoning"] = serde_json::Value::String(r.clone());
        }
        if let Some(u) = &self.usage {
            m["usage"] = serde_json::to_value(u).expect("usage serializes");
        }
        if let Some(e) = &self.parse_error {
            m["error"] = serde_json::Value::String(e.clone());
        }
        m
    }
}
