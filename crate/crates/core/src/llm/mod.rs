//! Chat-completion backends, prompt rendering, reply parsing and the
//! NIL-then-select adjudication state machine.

mod adjudicate;
mod parse;
mod prompt;

pub use adjudicate::{
    adjudicate_chain, adjudicate_single, AdjudicationError, AdjudicationResult, AdjudicationRoute,
    BackendFailurePolicy, Outcome, NIL,
};
pub use parse::{extract_selection, parse_binary_answer, BinaryAnswer};
pub use prompt::{
    candidates_json, render_nil_prompt, render_selection_prompt, PromptContext, PromptError,
    NIL_SYSTEM_PROMPT, NIL_USER_TEMPLATE, SELECTION_SCHEMA, SELECTION_SYSTEM_PROMPT,
    SELECTION_USER_TEMPLATE,
};

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{join_url, HttpClient, HttpError, InflightLimit};
use crate::retry::RetryPolicy;

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
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Sampling parameters sent with every chat call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f32,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 256,
            model: None,
        }
    }
}

/// One chat call. `mention_id` never goes on the wire; scripted backends key replies by it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip)]
    pub mention_id: Option<String>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, params: &ChatParams) -> Self {
        Self {
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            model: params.model.clone(),
            mention_id: None,
        }
    }

    pub fn for_mention(mut self, mention_id: Option<&str>) -> Self {
        self.mention_id = mention_id.map(str::to_string);
        self
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ChatError {
    #[error("chat transport failure: {0}")]
    Transport(String),
    #[error("chat endpoint returned HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed chat response: {0}")]
    Protocol(String),
    #[error("chat request has no messages")]
    EmptyMessages,
    #[error("scripted chat: {0}")]
    Script(String),
}

impl ChatError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ChatError::Transport(_))
    }
}

impl From<HttpError> for ChatError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Status { status, body } => ChatError::Status { status, body },
            HttpError::Decode(m) => ChatError::Protocol(m),
            other => ChatError::Transport(other.to_string()),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    /// Returns the assistant text for `request`.
    fn chat(&self, request: &ChatRequest) -> Result<String, ChatError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn chat(&self, request: &ChatRequest) -> Result<String, ChatError> {
        (**self).chat(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn chat(&self, request: &ChatRequest) -> Result<String, ChatError> {
        (**self).chat(request)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    content: String,
}

/// Single-attempt client for `POST {endpoint}/chat`. Wrap in [`RetryingChat`] for retries.
pub struct HttpChat {
    url: String,
    client: HttpClient,
    inflight: InflightLimit,
}

impl HttpChat {
    pub fn new(endpoint: &str, max_inflight: usize, timeout: Duration) -> Result<Self, ChatError> {
        Ok(Self {
            url: join_url(endpoint, "chat"),
            client: HttpClient::new(timeout, RetryPolicy::none())?,
            inflight: InflightLimit::new(max_inflight),
        })
    }
}

impl ChatBackend for HttpChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ChatError> {
        if request.messages.is_empty() {
            return Err(ChatError::EmptyMessages);
        }
        let _permit = self.inflight.acquire();
        let resp: ChatResponse = self.client.post_json(&self.url, request).0?;
        Ok(resp.content)
    }
}

/// Retries transient failures of the wrapped backend and counts the retries.
pub struct RetryingChat<B> {
    inner: B,
    policy: RetryPolicy,
    retries: AtomicU64,
}

impl<B: ChatBackend> RetryingChat<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Self {
            inner,
            policy,
            retries: AtomicU64::new(0),
        }
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for RetryingChat<B> {
    fn chat(&self, request: &ChatRequest) -> Result<String, ChatError> {
        if request.messages.is_empty() {
            return Err(ChatError::EmptyMessages);
        }
        let (result, retries) = self
            .policy
            .run(ChatError::is_retryable, |_| self.inner.chat(request));
        self.retries.fetch_add(u64::from(retries), Ordering::SeqCst);
        result
    }
}

/// HTTP chat with the default one-retry, 500 ms backoff policy.
pub fn http_chat(endpoint: &str, max_inflight: usize) -> Result<RetryingChat<HttpChat>, ChatError> {
    Ok(RetryingChat::new(
        HttpChat::new(endpoint, max_inflight, Duration::from_secs(300))?,
        RetryPolicy::default(),
    ))
}
