//! The retrieval MDP: episode state, transitions and environment backends.
//!
//! A backend plays the language model's three roles: it emits sub-queries,
//! turns retrieved documents into observations and produces the final
//! answer. [`ScriptedChainQa`] does this with fixed rules over a synthetic
//! fact graph; [`HttpLlmBackend`] delegates to a chat-completion endpoint.

mod chainqa;
mod http;

pub use chainqa::{
    chainqa_generate, graph_walk, AliasingMode, EnvConfig, GeneratedEnv, ScriptedChainQa,
    MISS_OBSERVATION,
};
pub use http::{
    http_llm_call, HttpConfig, HttpError, HttpLlmBackend, HttpLlmClient, LlmRole, PromptTemplates,
};

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::encoder::HistoryEntry;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("invalid task: {0}")]
    Task(String),
    #[error("episode already terminated")]
    Terminal,
    #[error("expected {expected} retrieved documents, got {got}")]
    RetrievedCount { expected: usize, got: usize },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("task file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A multi-hop question over the fact graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTask {
    pub question: String,
    pub answer: String,
    pub start: String,
    pub relations: Vec<String>,
    pub hops: usize,
}

impl ChainTask {
    pub fn validate(&self, max_steps: usize) -> Result<(), EnvError> {
        if self.hops == 0 {
            return Err(EnvError::Task("hop count must be at least 1".into()));
        }
        if self.hops != self.relations.len() {
            return Err(EnvError::Task(format!(
                "hop count {} disagrees with {} relations",
                self.hops,
                self.relations.len()
            )));
        }
        if self.hops > max_steps {
            return Err(EnvError::Task(format!(
                "hop count {} exceeds max steps {max_steps}",
                self.hops
            )));
        }
        Ok(())
    }
}

pub fn read_tasks(reader: impl Read) -> Result<Vec<ChainTask>, EnvError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| EnvError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<ChainTask>, EnvError> {
    read_tasks(std::fs::File::open(path)?)
}

pub fn write_tasks(mut writer: impl Write, tasks: &[ChainTask]) -> Result<(), EnvError> {
    for t in tasks {
        let line = serde_json::to_string(t).map_err(|e| EnvError::Task(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// History-aware MDP state: `(H_{t-1}, q_t)` plus the hop index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub history: Vec<HistoryEntry>,
    pub query: String,
    pub hop: usize,
    pub answer: Option<String>,
}

impl EpisodeState {
    pub fn new(question: impl Into<String>, first_query: impl Into<String>) -> Self {
        Self {
            history: vec![HistoryEntry::question(question)],
            query: first_query.into(),
            hop: 1,
            answer: None,
        }
    }

    pub fn question(&self) -> &str {
        &self.history[0].query
    }

    pub fn is_terminal(&self) -> bool {
        self.answer.is_some()
    }

    /// Appends `(q_t, o_t)` and moves to the next sub-query or terminates.
    pub fn apply(&mut self, transition: Transition) -> Result<(), EnvError> {
        if self.is_terminal() {
            return Err(EnvError::Terminal);
        }
        self.history.push(HistoryEntry::step(
            std::mem::take(&mut self.query),
            transition.observation,
        ));
        self.hop += 1;
        match transition.next {
            NextStep::Query(q) => self.query = q,
            NextStep::Answer(y) => self.answer = Some(y),
        }
        Ok(())
    }

    /// Observations recorded so far, oldest first.
    pub fn observations(&self) -> impl Iterator<Item = &str> {
        self.history.iter().filter_map(|h| h.observation.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NextStep {
    Query(String),
    Answer(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: String,
    pub next: NextStep,
}

/// The environment side of the MDP.
pub trait EnvironmentBackend: Send + Sync {
    fn reset(&self, task: &ChainTask) -> Result<EpisodeState, EnvError>;

    /// Consumes the retrieved list for the current sub-query.
    fn step(
        &self,
        task: &ChainTask,
        state: &EpisodeState,
        retrieved: &[&Document],
    ) -> Result<Transition, EnvError>;

    /// Upper bound on steps per episode.
    fn max_steps(&self) -> usize;
}
