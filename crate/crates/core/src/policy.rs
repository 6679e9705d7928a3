//! Policies: where generations come from.
//!
//! The executor drives a [`Policy`] one generation at a time. Production use
//! points [`HttpPolicy`] at a hosted chat-completion endpoint; tests and
//! replays use [`ScriptedPolicy`], which serves pre-recorded text and is
//! fully deterministic.

use crate::trace::Rollout;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;
use thiserror::Error;

/// One generation's text plus token usage when the backend reports it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Generation {
    pub text: String,
    /// Prompt tokens the backend counted, if any.
    pub n_in: Option<u64>,
    /// Completion tokens the backend counted, if any.
    pub n_out: Option<u64>,
}

impl Generation {
    pub fn text(text: impl Into<String>) -> Self {
        Generation {
            text: text.into(),
            ..Generation::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("script exhausted")]
    ScriptExhausted,
    #[error("environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("request failed: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {detail}")]
    BadStatus { status: u16, detail: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
}

/// Produces the next continuation of a rollout.
///
/// `stop` lists the markers generation must halt at; the returned text may
/// include the marker itself (a scripted chunk does) or end just before it
/// (hosted endpoints strip stop sequences) — the executor handles both.
pub trait Policy {
    fn generate(
        &mut self,
        question: &str,
        rollout: &Rollout,
        stop: &[&str],
    ) -> Result<Generation, PolicyError>;
}

/// Replays pre-recorded generation chunks in order.
///
/// Each `generate` call serves text up to and including the first stop
/// marker in the front chunk; the rest of that chunk is kept for the next
/// call. A chunk without any marker is served whole. This lets a full
/// trajectory be loaded as a single chunk and replayed generation by
/// generation, exactly as the original policy produced it.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    pending: VecDeque<String>,
    /// Number of `generate` calls answered so far.
    pub calls: usize,
}

/// One line of a script file.
#[derive(Debug, Serialize, Deserialize)]
struct ScriptLine {
    text: String,
}

impl ScriptedPolicy {
    pub fn from_chunks<I, S>(chunks: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedPolicy {
            pending: chunks.into_iter().map(Into::into).collect(),
            calls: 0,
        }
    }

    /// Loads a JSONL script: one `{"text": "..."}` object per line.
    pub fn from_jsonl<R: BufRead>(reader: R) -> std::io::Result<Self> {
        let mut pending = VecDeque::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: {e}", i + 1),
                )
            })?;
            pending.push_back(parsed.text);
        }
        Ok(ScriptedPolicy { pending, calls: 0 })
    }

    pub fn from_jsonl_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = std::fs::File::open(path)?;
        ScriptedPolicy::from_jsonl(std::io::BufReader::new(file))
    }

    pub fn remaining(&self) -> usize {
        self.pending.len()
    }
}

impl Policy for ScriptedPolicy {
    fn generate(
        &mut self,
        _question: &str,
        _rollout: &Rollout,
        stop: &[&str],
    ) -> Result<Generation, PolicyError> {
        let chunk = self
            .pending
            .pop_front()
            .ok_or(PolicyError::ScriptExhausted)?;
        self.calls += 1;
        let cut = stop
            .iter()
            .filter_map(|marker| chunk.find(marker).map(|at| at + marker.len()))
            .min();
        let text = match cut {
            Some(end) if end < chunk.len() => {
                let rest = chunk[end..].to_string();
                if !rest.trim().is_empty() {
                    self.pending.push_front(rest);
                }
                chunk[..end].to_string()
            }
            _ => chunk,
        };
        Ok(Generation::text(text))
    }
}

/// Instructions sent as the system message: the tag protocol, stated for the
/// model.
pub const DEFAULT_SYSTEM_PROMPT: &str = "\
You answer multi-hop questions by decomposing them and calling tools.
Structure every response with these tags, one at a time, never nested:
<think>…</think> private reasoning before anything else you do.
<plan>…</plan> numbered sub-tasks, each stating its dependencies (`none` if independent), e.g. `Task 1: find X` / `- Dependencies: none`.
<search>…</search> queries to execute now; separate simultaneous independent queries with |.
<observation>…</observation> tool results; the runtime writes these, never you.
<reflection>…</reflection> progress check, if the plan needs revising.
<answer>…</answer> the final short answer; separate multiple answers with |.
Plan first. Issue every search the moment its dependencies are satisfied, batching independent queries into one <search> block. Answer only when certain.";

/// Connection settings for a hosted chat-completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpPolicyConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token. The key
    /// itself never appears in config files or flags.
    pub api_key_env: Option<String>,
    pub max_tokens: u32,
    pub temperature: f32,
    #[serde(default = "default_system_prompt")]
    pub system_prompt: String,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_system_prompt() -> String {
    DEFAULT_SYSTEM_PROMPT.to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

impl HttpPolicyConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpPolicyConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            max_tokens: 1024,
            temperature: 0.0,
            system_prompt: default_system_prompt(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

/// Chat-completion client in the de-facto hosted-LLM wire shape.
///
/// Each generate call sends system + question + the rollout so far, with the
/// phase's stop markers; reported usage flows back into token accounting.
/// One retry with backoff on transport errors and 5xx responses.
pub struct HttpPolicy {
    config: HttpPolicyConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    backoff: Duration,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<&'a str>,
    max_tokens: u32,
    temperature: f32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl HttpPolicy {
    /// Builds the client, resolving the API key from the configured
    /// environment variable.
    pub fn new(config: HttpPolicyConfig) -> Result<Self, PolicyError> {
        let api_key = match &config.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| PolicyError::MissingApiKey(var.clone()))?)
            }
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        Ok(HttpPolicy {
            config,
            api_key,
            client,
            backoff: Duration::from_millis(500),
        })
    }

    /// Shrinks the retry backoff; tests use this to stay fast.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn send(&self, body: &ChatRequest<'_>) -> Result<ChatResponse, PolicyError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut request = self.client.post(&url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(PolicyError::BadStatus {
                status: status.as_u16(),
                detail: text.chars().take(200).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| PolicyError::BadResponse(e.to_string()))
    }
}

impl Policy for HttpPolicy {
    fn generate(
        &mut self,
        question: &str,
        rollout: &Rollout,
        stop: &[&str],
    ) -> Result<Generation, PolicyError> {
        let rendered = rollout.render_events();
        let mut messages = vec![
            ChatMessage {
                role: "system",
                content: &self.config.system_prompt,
            },
            ChatMessage {
                role: "user",
                content: question,
            },
        ];
        if !rendered.is_empty() {
            messages.push(ChatMessage {
                role: "assistant",
                content: &rendered,
            });
        }
        let body = ChatRequest {
            model: &self.config.model,
            messages,
            stop: stop.to_vec(),
            max_tokens: self.config.max_tokens,
            temperature: self.config.temperature,
        };
        let response = match self.send(&body) {
            Ok(r) => r,
            Err(PolicyError::Transport(_))
            | Err(PolicyError::BadStatus {
                status: 500..=599, ..
            }) => {
                // Transient failure: back off once and retry.
                std::thread::sleep(self.backoff);
                self.send(&body)?
            }
            Err(other) => return Err(other),
        };
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| PolicyError::BadResponse("no choices".to_string()))?;
        let text = choice.message.content.unwrap_or_default();
        let (n_in, n_out) = match response.usage {
            Some(usage) => (usage.prompt_tokens, usage.completion_tokens),
            None => (None, None),
        };
        Ok(Generation { text, n_in, n_out })
    }
}
