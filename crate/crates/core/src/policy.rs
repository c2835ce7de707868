//! Plackett-Luce ranked-retrieval policy over a candidate pool.
//!
//! A ranked list of `k` documents is drawn by sequential softmax selection
//! without replacement at temperature `τ`. The log-probability of a list is
//! the sum of the per-position masked log-softmax values; the differentiable
//! version recomputes pool scores from the state encoding.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, AutodiffError, Graph, NodeId};
use crate::corpus::{CandidatePool, EmbeddingIndex};

/// Largest pool accepted by [`enumerate_action_probs`].
pub const MAX_ENUMERATION_POOL: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("cannot rank {k} documents from a pool of {pool}")]
    KTooLarge { k: usize, pool: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("document {0} is not a member of the candidate pool")]
    NotInPool(usize),
    #[error("enumeration is limited to pools of {MAX_ENUMERATION_POOL}, got {0}")]
    PoolTooLarge(usize),
    #[error("ids and scores differ in length")]
    LengthMismatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// An ordered list of distinct document ids with optional log-probabilities
/// (absent for deterministic inference rankings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAction {
    pub doc_ids: Vec<usize>,
    pub log_probs: Option<Vec<f64>>,
}

impl RankedAction {
    pub fn k(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn total_log_prob(&self) -> Option<f64> {
        self.log_probs.as_ref().map(|lp| lp.iter().sum())
    }
}

fn check(k: usize, pool: usize, temperature: f64) -> Result<(), PolicyError> {
    if k > pool {
        return Err(PolicyError::KTooLarge { k, pool });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PolicyError::InvalidTemperature(temperature));
    }
    Ok(())
}

/// Samples a ranked list from the pool's stored scores.
pub fn pl_sample<R: Rng + ?Sized>(
    pool: &CandidatePool,
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<RankedAction, PolicyError> {
    check(k, pool.len(), temperature)?;
    let scores = pool.scores();
    let mut mask = vec![false; scores.len()];
    let mut doc_ids = Vec::with_capacity(k);
    let mut log_probs = Vec::with_capacity(k);
    for _ in 0..k {
        let lsm = kernels::masked_log_softmax(scores, &mask, temperature);
        let u: f64 = rng.random();
        let mut chosen = None;
        let mut cum = 0.0;
        for (j, lp) in lsm.iter().enumerate() {
            if mask[j] {
                continue;
            }
            chosen = Some(j);
            cum += lp.exp();
            if u < cum {
                break;
            }
        }
        // falls back to the last unmasked entry when rounding leaves cum < u
        let j = chosen.expect("k <= pool guarantees an unmasked entry");
        mask[j] = true;
        doc_ids.push(pool.ids()[j]);
        log_probs.push(lsm[j]);
    }
    Ok(RankedAction {
        doc_ids,
        log_probs: Some(log_probs),
    })
}

/// Differentiable log-probability of `action` given the encoded state.
///
/// Pool membership is taken from `pool`; scores are recomputed as
/// `state · enc(d)` for every member so gradients reach the state encoder.
pub fn pl_log_prob(
    graph: &mut Graph,
    state: NodeId,
    index: &EmbeddingIndex,
    pool: &CandidatePool,
    action: &RankedAction,
    temperature: f64,
) -> Result<NodeId, PolicyError> {
    check(action.k(), pool.len(), temperature)?;
    let positions = action
        .doc_ids
        .iter()
        .map(|&id| pool.position(id).ok_or(PolicyError::NotInPool(id)))
        .collect::<Result<Vec<_>, _>>()?;
    let docs_t = graph.leaf(index.pool_matrix_t(pool.ids()), false)?;
    let scores = graph.matmul(state, docs_t)?;
    let mut mask = vec![false; pool.len()];
    let mut terms = Vec::with_capacity(positions.len());
    for &p in &positions {
        let lsm = graph.masked_log_softmax(scores, &mask, temperature)?;
        terms.push(graph.pick(lsm, p)?);
        mask[p] = true;
    }
    Ok(graph.add(&terms)?)
}

/// Top-k by score (descending, lower id first on ties). No log-probs.
pub fn deterministic_rank(pool: &CandidatePool, k: usize) -> Result<RankedAction, PolicyError> {
    if k > pool.len() {
        return Err(PolicyError::KTooLarge {
            k,
            pool: pool.len(),
        });
    }
    let mut order: Vec<(usize, f64)> = pool
        .ids()
        .iter()
        .copied()
        .zip(pool.scores().iter().copied())
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(RankedAction {
        doc_ids: order.into_iter().take(k).map(|p| p.0).collect(),
        log_probs: None,
    })
}

/// Exact probability of every ordered `k`-list of `ids` under the
/// sequential-softmax model with the given scores. Test oracle; computed
/// directly from products of selection probabilities.
pub fn enumerate_action_probs(
    ids: &[usize],
    scores: &[f64],
    k: usize,
    temperature: f64,
) -> Result<BTreeMap<Vec<usize>, f64>, PolicyError> {
    if ids.len() != scores.len() {
        return Err(PolicyError::LengthMismatch);
    }
    if ids.len() > MAX_ENUMERATION_POOL {
        return Err(PolicyError::PoolTooLarge(ids.len()));
    }
    check(k, ids.len(), temperature)?;
    let mut out = BTreeMap::new();
    let mut prefix = Vec::with_capacity(k);
    let mut used = vec![false; ids.len()];
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        ids: &[usize],
        scores: &[f64],
        temperature: f64,
        k: usize,
        prob: f64,
        prefix: &mut Vec<usize>,
        used: &mut [bool],
        out: &mut BTreeMap<Vec<usize>, f64>,
    ) {
        if prefix.len() == k {
            out.insert(prefix.clone(), prob);
            return;
        }
        // weights relative to the best remaining score never underflow to all-zero
        let max = (0..ids.len())
            .filter(|&j| !used[j])
            .map(|j| scores[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let weight = |j: usize| ((scores[j] - max) / temperature).exp();
        let remaining: f64 = (0..ids.len()).filter(|&j| !used[j]).map(weight).sum();
        for j in 0..ids.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            prefix.push(ids[j]);
            let p = prob * weight(j) / remaining;
            recurse(ids, scores, temperature, k, p, prefix, used, out);
            prefix.pop();
            used[j] = false;
        }
    }
    recurse(
        ids,
        scores,
        temperature,
        k,
        1.0,
        &mut prefix,
        &mut used,
        &mut out,
    );
    Ok(out)
}
