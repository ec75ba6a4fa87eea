//! Chat-completion backend contract and the live HTTP implementation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::gateway::TemplateName;

/// Environment variable holding the bearer token for live backends.
pub const API_KEY_ENV: &str = "LLM_API_KEY";

/// One request to a chat backend. `turns` is an ordered list of user messages
/// (almost always a single turn; oversized label tables are split in two).
/// `attempt` is 1-based and lets replay backends key on the retry position.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub template: TemplateName,
    pub turns: Vec<String>,
    pub attempt: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub max_output_tokens: u32,
}

impl CompletionRequest {
    /// All turns joined; what a single-message transport would send.
    pub fn prompt(&self) -> String {
        self.turns.join("\n\n")
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("api: {0}")]
    Api(String),
    #[error("no scripted response for ({template}, attempt {attempt})")]
    NoScript { template: String, attempt: u32 },
}

/// A synchronous chat-completion provider. Implementations must be safe to
/// call from several worker threads at once; retry policy lives in the
/// gateway, not here.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &CompletionRequest) -> std::result::Result<String, BackendError>;
}

/// Backend driven by a closure; handy for tests and adapters.
pub struct FnBackend<F>
where
    F: Fn(&CompletionRequest) -> std::result::Result<String, BackendError> + Send + Sync,
{
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> std::result::Result<String, BackendError> + Send + Sync,
{
    pub fn new(name: &str, f: F) -> Self {
        FnBackend {
            name: name.to_string(),
            f,
        }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> std::result::Result<String, BackendError> + Send + Sync,
{
    fn id(&self) -> String {
        self.name.clone()
    }

    fn complete(&self, request: &CompletionRequest) -> std::result::Result<String, BackendError> {
        (self.f)(request)
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    top_p: f64,
    frequency_penalty: f64,
    presence_penalty: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// Live backend speaking the chat-completions wire protocol: POST with a JSON
/// message list and sampling parameters, bearer-token auth from
/// [`API_KEY_ENV`].
pub struct HttpChatBackend {
    endpoint: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    /// Reads the API key from the environment; fails fast when unset.
    pub fn new(endpoint: &str, model: &str) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Config(format!("{API_KEY_ENV} is not set")))?;
        Self::with_api_key(endpoint, model, &api_key)
    }

    pub fn with_api_key(endpoint: &str, model: &str, api_key: &str) -> Result<Self> {
        if endpoint.trim().is_empty() {
            return Err(Error::Config("llm endpoint must be non-empty".to_string()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpChatBackend {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: api_key.to_string(),
            client,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> String {
        format!("http:{}:{}", self.endpoint, self.model)
    }

    fn complete(&self, request: &CompletionRequest) -> std::result::Result<String, BackendError> {
        let body = WireRequest {
            model: &self.model,
            messages: request
                .turns
                .iter()
                .map(|t| WireMessage {
                    role: "user",
                    content: t,
                })
                .collect(),
            temperature: request.temperature,
            top_p: request.top_p,
            frequency_penalty: request.frequency_penalty,
            presence_penalty: request.presence_penalty,
            max_tokens: request.max_output_tokens,
        };
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;

        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            return Err(BackendError::Api(format!("status {status}: {snippet}")));
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::Api(format!("bad response body: {e}")))?;
        wire.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Api("response had no choices".to_string()))
    }
}
