//! Text encoders for the retriever.
//!
//! The state encoder is trainable; the document encoder is a frozen copy of
//! the parameters taken at initialization. Both run the same arithmetic:
//! token embedding lookup, mean pooling, a linear projection and unit
//! normalization.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, Array, AutodiffError, Graph, NodeId, MIN_NORM};

pub const UNKNOWN_TOKEN: &str = "[unk]";
pub const SEPARATOR: &str = "[SEP]";
pub const QUERY_MARKER: &str = "q:";
pub const OBSERVATION_MARKER: &str = "o:";
pub const TEMPLATE_VERSION: &str = "qo-sep-v1";

/// Bound on initial parameter magnitudes.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("current sub-query must be non-empty")]
    EmptyQuery,
    #[error("parameter dimensions must be positive")]
    ZeroDimension,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Lowercase whitespace tokenizer over a dense vocabulary.
#[derive(Clone, PartialEq, Eq)]
pub struct TokenizerConfig {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    unknown: usize,
    separator: String,
}

impl fmt::Debug for TokenizerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenizerConfig")
            .field("vocab_size", &self.tokens.len())
            .field("unknown", &self.unknown)
            .field("separator", &self.separator)
            .finish()
    }
}

impl TokenizerConfig {
    /// `tokens[i]` gets id `i`. Tokens must be unique, lowercase and contain
    /// the unknown token.
    pub fn new(tokens: Vec<String>) -> Result<Self, EncoderError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(EncoderError::Vocabulary(format!(
                    "line {}: token {t:?} is empty or contains whitespace",
                    i + 1
                )));
            }
            if t.to_lowercase() != *t {
                return Err(EncoderError::Vocabulary(format!(
                    "line {}: token {t:?} is not lowercase",
                    i + 1
                )));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(EncoderError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        let unknown = *ids
            .get(UNKNOWN_TOKEN)
            .ok_or_else(|| EncoderError::Vocabulary(format!("missing {UNKNOWN_TOKEN}")))?;
        Ok(Self {
            tokens,
            ids,
            unknown,
            separator: SEPARATOR.to_string(),
        })
    }

    /// Builds a vocabulary from texts: reserved tokens first, then every
    /// other token in order of first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = [
            UNKNOWN_TOKEN,
            &SEPARATOR.to_lowercase(),
            QUERY_MARKER,
            OBSERVATION_MARKER,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for text in texts {
            for tok in text.to_lowercase().split_whitespace() {
                if seen.insert(tok.to_string()) {
                    tokens.push(tok.to_string());
                }
            }
        }
        Self::new(tokens).expect("reserved tokens are valid")
    }

    /// Parses a vocabulary file: one token per line, id = line index.
    pub fn from_vocab_text(text: &str) -> Result<Self, EncoderError> {
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn to_vocab_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unknown_id(&self) -> usize {
        self.unknown
    }

    pub fn separator(&self) -> &str {
        &self.separator
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.to_lowercase()
            .split_whitespace()
            .map(|t| self.ids.get(t).copied().unwrap_or(self.unknown))
            .collect()
    }

    /// Token ids for encoding; empty text maps to the unknown token alone.
    fn encoder_ids(&self, text: &str) -> Vec<usize> {
        let ids = self.tokenize(text);
        if ids.is_empty() {
            vec![self.unknown]
        } else {
            ids
        }
    }
}

/// One retrieval step of history: the sub-query and the observation it
/// produced. The first entry carries the initial question with no
/// observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub query: String,
    pub observation: Option<String>,
}

impl HistoryEntry {
    pub fn question(q0: impl Into<String>) -> Self {
        Self {
            query: q0.into(),
            observation: None,
        }
    }

    pub fn step(query: impl Into<String>, observation: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            observation: Some(observation.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    HistoryAware,
    QueryOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateRendering {
    pub mode: RenderMode,
    pub max_tokens: usize,
    pub template_version: &'static str,
}

impl StateRendering {
    pub fn new(mode: RenderMode, max_tokens: usize) -> Self {
        Self {
            mode,
            max_tokens,
            template_version: TEMPLATE_VERSION,
        }
    }
}

impl Default for StateRendering {
    fn default() -> Self {
        Self::new(RenderMode::HistoryAware, 128)
    }
}

fn render_entry(entry: &HistoryEntry) -> String {
    match &entry.observation {
        Some(o) => format!(
            "{QUERY_MARKER} {} {SEPARATOR} {OBSERVATION_MARKER} {o}",
            entry.query
        ),
        None => format!("{QUERY_MARKER} {}", entry.query),
    }
}

/// Serializes `(history, current query)` into encoder input.
///
/// History-aware layout: `q: q0 [SEP] q: q1 [SEP] o: o1 [SEP] ... [SEP] q: qt`.
/// Over budget, the oldest entries after the first are dropped; the first
/// entry and the current query are always kept.
pub fn render_state(
    history: &[HistoryEntry],
    current: &str,
    rendering: &StateRendering,
) -> Result<String, EncoderError> {
    if current.trim().is_empty() {
        return Err(EncoderError::EmptyQuery);
    }
    if rendering.mode == RenderMode::QueryOnly {
        return Ok(current.to_string());
    }
    let tail = format!("{QUERY_MARKER} {current}");
    let Some((first, rest)) = history.split_first() else {
        return Ok(tail);
    };
    let head = render_entry(first);
    let middle: Vec<String> = rest.iter().map(render_entry).collect();
    let count = |s: &str| s.split_whitespace().count();
    // each joined segment costs one separator token
    let fixed = count(&head) + 1 + count(&tail);
    let costs: Vec<usize> = middle.iter().map(|s| count(s) + 1).collect();
    let mut total = fixed + costs.iter().sum::<usize>();
    let mut start = 0;
    while total > rendering.max_tokens && start < middle.len() {
        total -= costs[start];
        start += 1;
    }
    let mut parts = Vec::with_capacity(middle.len() - start + 2);
    parts.push(head);
    parts.extend(middle[start..].iter().cloned());
    parts.push(tail);
    Ok(parts.join(&format!(" {SEPARATOR} ")))
}

/// Trainable encoder weights: `V×d_e` token embeddings and a `d_e×d`
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub token_embeddings: Array,
    pub projection: Array,
}

impl PolicyParameters {
    pub fn new(token_embeddings: Array, projection: Array) -> Result<Self, EncoderError> {
        if token_embeddings.shape().len() != 2
            || projection.shape().len() != 2
            || token_embeddings.cols() != projection.rows()
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "policy_parameters",
                left: token_embeddings.shape().to_vec(),
                right: projection.shape().to_vec(),
            }
            .into());
        }
        Ok(Self {
            token_embeddings,
            projection,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.token_embeddings.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn arrays(&self) -> [&Array; 2] {
        [&self.token_embeddings, &self.projection]
    }

    pub fn arrays_mut(&mut self) -> [&mut Array; 2] {
        [&mut self.token_embeddings, &mut self.projection]
    }

    /// Registers both matrices as graph leaves.
    pub fn attach(
        &self,
        graph: &mut Graph,
        requires_grad: bool,
    ) -> Result<ParamNodes, EncoderError> {
        Ok(ParamNodes {
            token_embeddings: graph.leaf(self.token_embeddings.clone(), requires_grad)?,
            projection: graph.leaf(self.projection.clone(), requires_grad)?,
        })
    }
}

/// Graph handles of the policy parameters.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub token_embeddings: NodeId,
    pub projection: NodeId,
}

/// Entries i.i.d. uniform in `[-0.1, 0.1]`, embeddings drawn before the
/// projection.
pub fn init_params(
    seed: u64,
    vocab_size: usize,
    embed_dim: usize,
    output_dim: usize,
) -> Result<PolicyParameters, EncoderError> {
    if vocab_size == 0 || embed_dim == 0 || output_dim == 0 {
        return Err(EncoderError::ZeroDimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
            .collect()
    };
    let emb = draw(vocab_size * embed_dim);
    let proj = draw(embed_dim * output_dim);
    PolicyParameters::new(
        Array::new(vec![vocab_size, embed_dim], emb)?,
        Array::new(vec![embed_dim, output_dim], proj)?,
    )
}

/// Differentiable state encoding: gather → mean → project → normalize.
pub fn encode_state(
    graph: &mut Graph,
    params: ParamNodes,
    tokenizer: &TokenizerConfig,
    text: &str,
) -> Result<NodeId, EncoderError> {
    let ids = tokenizer.encoder_ids(text);
    let rows = graph.gather_rows(params.token_embeddings, &ids)?;
    let pooled = graph.row_mean(rows)?;
    let projected = graph.matmul(pooled, params.projection)?;
    Ok(graph.unit_normalize(projected)?)
}

/// Value-only encoding with the same kernels as [`encode_state`].
pub fn embed_text(
    params: &PolicyParameters,
    tokenizer: &TokenizerConfig,
    text: &str,
) -> Result<Vec<f64>, EncoderError> {
    let ids = tokenizer.encoder_ids(text);
    let v = params.vocab_size();
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(AutodiffError::IndexOutOfRange { index: bad, len: v }.into());
    }
    let rows = kernels::gather_rows(&params.token_embeddings, &ids);
    let pooled = kernels::row_mean(&rows);
    let projected = kernels::matmul(&pooled, &params.projection);
    let n = kernels::norm(projected.data());
    if n <= MIN_NORM {
        return Err(AutodiffError::NearZeroNorm(n).into());
    }
    Ok(kernels::unit_normalize(&projected).0.into_data())
}

/// Frozen document encoder: a parameter snapshot that never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentEncoder {
    snapshot: PolicyParameters,
}

impl DocumentEncoder {
    pub fn freeze(params: &PolicyParameters) -> Self {
        Self {
            snapshot: params.clone(),
        }
    }

    pub fn snapshot(&self) -> &PolicyParameters {
        &self.snapshot
    }

    pub fn encode(
        &self,
        tokenizer: &TokenizerConfig,
        text: &str,
    ) -> Result<Vec<f64>, EncoderError> {
        embed_text(&self.snapshot, tokenizer, text)
    }
}

/// Frozen embedding of one document as a `1×d` array.
pub fn encode_document(
    encoder: &DocumentEncoder,
    tokenizer: &TokenizerConfig,
    text: &str,
) -> Result<Array, EncoderError> {
    Ok(Array::row(encoder.encode(tokenizer, text)?)?)
}
