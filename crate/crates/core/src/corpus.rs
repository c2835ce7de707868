//! Document storage, the frozen embedding index and exact top-K search.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, Array};
use crate::encoder::{DocumentEncoder, EncoderError, TokenizerConfig};

/// Default candidate pool size.
pub const DEFAULT_POOL_SIZE: usize = 30;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("document ids must be dense from 0: expected {expected}, found {found}")]
    IdGap { expected: usize, found: usize },
    #[error("pool size must be at least 1")]
    ZeroPool,
    #[error("index rows have dimension {index}, state vector has {state}")]
    DimensionMismatch { index: usize, state: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: usize,
    pub text: String,
}

/// Reads a JSON-lines corpus and checks ids are `0..N` in order.
pub fn read_corpus(reader: impl Read) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if doc.text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: i + 1,
                reason: "empty text".into(),
            });
        }
        if doc.id != docs.len() {
            return Err(CorpusError::IdGap {
                expected: docs.len(),
                found: doc.id,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    read_corpus(std::fs::File::open(path)?)
}

pub fn write_corpus(mut writer: impl Write, docs: &[Document]) -> Result<(), CorpusError> {
    for d in docs {
        let line = serde_json::to_string(d).map_err(|e| CorpusError::Malformed {
            line: d.id + 1,
            reason: e.to_string(),
        })?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Frozen `N×d` document embeddings; row `i` is document `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    matrix: Array,
}

impl EmbeddingIndex {
    pub fn from_matrix(matrix: Array) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &Array {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row_slice(id)
    }

    /// `d×K` matrix whose columns are the pool members' embeddings.
    pub fn pool_matrix_t(&self, ids: &[usize]) -> Array {
        let d = self.dim();
        let k = ids.len();
        let mut out = vec![0.0; d * k];
        for (j, &id) in ids.iter().enumerate() {
            for (l, v) in self.row(id).iter().enumerate() {
                out[l * k + j] = *v;
            }
        }
        Array::new(vec![d, k], out).expect("index rows are finite")
    }
}

pub fn build_index(
    encoder: &DocumentEncoder,
    tokenizer: &TokenizerConfig,
    docs: &[Document],
) -> Result<EmbeddingIndex, CorpusError> {
    let d = encoder.snapshot().output_dim();
    let mut data = Vec::with_capacity(docs.len() * d);
    for doc in docs {
        data.extend(encoder.encode(tokenizer, &doc.text)?);
    }
    let matrix = Array::new(vec![docs.len(), d], data).map_err(EncoderError::from)?;
    Ok(EmbeddingIndex { matrix })
}

/// Top-K documents for one state, scores descending.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    ids: Vec<usize>,
    scores: Vec<f64>,
}

fn rank_order(a: (usize, f64), b: (usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl CandidatePool {
    /// Builds a pool from arbitrary `(id, score)` pairs, sorting by score
    /// descending with ties broken by lower id. Ids must be distinct.
    pub fn new(ids: Vec<usize>, scores: Vec<f64>) -> Self {
        assert_eq!(ids.len(), scores.len(), "one score per id");
        let mut pairs: Vec<(usize, f64)> = ids.into_iter().zip(scores).collect();
        pairs.sort_by(|a, b| rank_order(*a, *b));
        debug_assert!(pairs.windows(2).all(|w| w[0].0 != w[1].0));
        Self {
            ids: pairs.iter().map(|p| p.0).collect(),
            scores: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, doc_id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == doc_id)
    }
}

/// Exact search by full scan. Returns `min(K, N)` documents.
pub fn top_k_exact(
    index: &EmbeddingIndex,
    state: &[f64],
    pool_size: usize,
) -> Result<CandidatePool, CorpusError> {
    if pool_size == 0 {
        return Err(CorpusError::ZeroPool);
    }
    if state.len() != index.dim() {
        return Err(CorpusError::DimensionMismatch {
            index: index.dim(),
            state: state.len(),
        });
    }
    let scores = kernels::dot_rows(state, index.matrix());
    let mut pairs: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    let k = pool_size.min(pairs.len());
    if k < pairs.len() && k > 0 {
        pairs.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        pairs.truncate(k);
    }
    pairs.sort_by(|a, b| rank_order(*a, *b));
    Ok(CandidatePool {
        ids: pairs.iter().map(|p| p.0).collect(),
        scores: pairs.iter().map(|p| p.1).collect(),
    })
}
