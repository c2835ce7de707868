//! Chat-completion backend for the three language-model roles.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{ChainTask, EnvError, EnvironmentBackend, EpisodeState, NextStep, Transition};
use crate::corpus::Document;

/// Reply from the query role that ends the episode early.
pub const DONE_REPLY: &str = "DONE";

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Parse(String),
}

impl HttpError {
    fn retryable(&self) -> bool {
        match self {
            HttpError::Timeout { .. } | HttpError::Transport(_) => true,
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            HttpError::Parse(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding a bearer token; unset means no header.
    pub api_key_env: String,
    pub temperature: f64,
    pub timeout_secs: f64,
    pub max_retries: usize,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: "RETRL_API_KEY".into(),
            temperature: 0.0,
            timeout_secs: 30.0,
            max_retries: 3,
            backoff_ms: 250,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmRole {
    Query,
    Observe,
    Answer,
}

/// Prompt templates. Placeholders: `{question}`, `{history}`, `{query}`,
/// `{documents}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplates {
    pub system: String,
    pub query: String,
    pub observe: String,
    pub answer: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: "You answer multi-hop questions one retrieval at a time. Reply tersely.".into(),
            query: "Question: {question}\nSteps so far:\n{history}\nWrite the next search \
                    query, or DONE if the question can be answered."
                .into(),
            observe: "Search query: {query}\nDocuments:\n{documents}\nState the single fact \
                      that answers the query, copied verbatim, or say no relevant fact found."
                .into(),
            answer: "Question: {question}\nSteps so far:\n{history}\nGive only the final answer."
                .into(),
        }
    }
}

impl PromptTemplates {
    pub fn template(&self, role: LlmRole) -> &str {
        match role {
            LlmRole::Query => &self.query,
            LlmRole::Observe => &self.observe,
            LlmRole::Answer => &self.answer,
        }
    }

    pub fn render(&self, role: LlmRole, vars: &[(&str, &str)]) -> String {
        let mut out = self.template(role).to_string();
        for (key, value) in vars {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        out
    }
}

/// Blocking chat-completion client with retries and a bound on concurrent
/// requests.
pub struct HttpLlmClient {
    agent: ureq::Agent,
    config: HttpConfig,
    in_flight: Mutex<usize>,
    slot_free: Condvar,
}

impl std::fmt::Debug for HttpLlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpLlmClient")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl HttpLlmClient {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs.max(0.0))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            config,
            in_flight: Mutex::new(0),
            slot_free: Condvar::new(),
        }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn acquire(&self) {
        let limit = self.config.max_in_flight.max(1);
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= limit {
            n = self.slot_free.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
    }

    fn release(&self) {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.slot_free.notify_one();
    }

    fn attempt(&self, body: &Value) -> Result<String, HttpError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut request = self.agent.post(&url);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => HttpError::Timeout { attempts: 1 },
            other => HttpError::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(HttpError::Status { status, body });
        }
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| HttpError::Parse(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.trim().to_string())
            .ok_or_else(|| HttpError::Parse("missing choices[0].message.content".into()))
    }

    /// Sends one system + user exchange and returns the reply text.
    pub fn complete(&self, system: &str, user: &str) -> Result<String, HttpError> {
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        self.acquire();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match self.attempt(&body) {
                Err(e) if e.retryable() && attempts <= self.config.max_retries => {
                    let delay = self
                        .config
                        .backoff_ms
                        .saturating_mul(1 << (attempts - 1).min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(HttpError::Timeout { .. }) => break Err(HttpError::Timeout { attempts }),
                other => break other,
            }
        };
        self.release();
        result
    }
}

/// One role call: renders the template and sends it.
pub fn http_llm_call(
    client: &HttpLlmClient,
    templates: &PromptTemplates,
    role: LlmRole,
    vars: &[(&str, &str)],
) -> Result<String, HttpError> {
    client.complete(&templates.system, &templates.render(role, vars))
}

/// Environment backend driven by a chat-completion model.
#[derive(Debug)]
pub struct HttpLlmBackend {
    client: HttpLlmClient,
    templates: PromptTemplates,
    top_k: usize,
    max_steps: usize,
}

impl HttpLlmBackend {
    pub fn new(
        client: HttpLlmClient,
        templates: PromptTemplates,
        top_k: usize,
        max_steps: usize,
    ) -> Self {
        Self {
            client,
            templates,
            top_k,
            max_steps,
        }
    }

    fn history_text(state: &EpisodeState) -> String {
        state
            .history
            .iter()
            .skip(1)
            .map(|h| {
                format!(
                    "- {} => {}",
                    h.query,
                    h.observation.as_deref().unwrap_or("")
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn call(&self, role: LlmRole, vars: &[(&str, &str)]) -> Result<String, EnvError> {
        Ok(http_llm_call(&self.client, &self.templates, role, vars)?)
    }
}

impl EnvironmentBackend for HttpLlmBackend {
    fn reset(&self, task: &ChainTask) -> Result<EpisodeState, EnvError> {
        let q = self.call(
            LlmRole::Query,
            &[("question", &task.question), ("history", "")],
        )?;
        Ok(EpisodeState::new(task.question.clone(), q))
    }

    fn step(
        &self,
        _task: &ChainTask,
        state: &EpisodeState,
        retrieved: &[&Document],
    ) -> Result<Transition, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::Terminal);
        }
        if retrieved.len() != self.top_k {
            return Err(EnvError::RetrievedCount {
                expected: self.top_k,
                got: retrieved.len(),
            });
        }
        let documents = retrieved
            .iter()
            .map(|d| format!("[{}] {}", d.id, d.text))
            .collect::<Vec<_>>()
            .join("\n");
        let observation = self.call(
            LlmRole::Observe,
            &[("query", &state.query), ("documents", &documents)],
        )?;

        let mut next_state = state.clone();
        next_state.history.push(crate::encoder::HistoryEntry::step(
            state.query.clone(),
            observation.clone(),
        ));
        let history = Self::history_text(&next_state);
        let question = state.question().to_string();
        let vars = [
            ("question", question.as_str()),
            ("history", history.as_str()),
        ];

        let next = if state.hop >= self.max_steps {
            NextStep::Answer(self.call(LlmRole::Answer, &vars)?)
        } else {
            let q = self.call(LlmRole::Query, &vars)?;
            if q.trim() == DONE_REPLY {
                NextStep::Answer(self.call(LlmRole::Answer, &vars)?)
            } else {
                NextStep::Query(q)
            }
        };
        Ok(Transition { observation, next })
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }
}
