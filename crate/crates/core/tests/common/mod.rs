//! Reference computations written independently of the library code paths
//! they check. Plain loops, no shared kernels.

#![allow(dead_code)]

use std::collections::BTreeMap;

use retrl::autodiff::{Array, Graph, NodeId};
use retrl::corpus::Document;
use retrl::encoder::{PolicyParameters, TokenizerConfig};
use retrl::env::ChainTask;

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Probability of every ordered `k`-list of positions `0..scores.len()`
/// under sequential softmax selection, by odometer enumeration.
pub fn ranking_probs(scores: &[f64], k: usize, temperature: f64) -> BTreeMap<Vec<usize>, f64> {
    let n = scores.len();
    let mut out = BTreeMap::new();
    let mut digits = vec![0usize; k];
    loop {
        let distinct = (0..k).all(|i| (0..i).all(|j| digits[i] != digits[j]));
        if distinct {
            let mut logp = 0.0;
            for step in 0..k {
                let remaining: Vec<f64> = (0..n)
                    .filter(|j| !digits[..step].contains(j))
                    .map(|j| scores[j] / temperature)
                    .collect();
                logp += scores[digits[step]] / temperature - log_sum_exp(&remaining);
            }
            out.insert(digits.clone(), logp.exp());
        }
        let mut pos = k;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < n {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// Central differences of `f` with respect to every entry of every input.
pub fn central_differences<F>(f: F, inputs: &[Array], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Array]) -> f64,
{
    inputs
        .iter()
        .enumerate()
        .map(|(a, x)| {
            (0..x.len())
                .map(|i| {
                    let shifted = |delta: f64| {
                        let mut data = x.data().to_vec();
                        data[i] += delta;
                        let mut xs = inputs.to_vec();
                        xs[a] = Array::new(x.shape().to_vec(), data).unwrap();
                        xs
                    };
                    (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Worst `|g_ad − g_fd| / max(1, |g_fd|)` over all inputs of a graph
/// function returning a scalar node.
pub fn gradient_error<F>(build: F, inputs: &[Array], h: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut graph = Graph::new();
    let leaves: Vec<NodeId> = inputs
        .iter()
        .map(|x| graph.leaf(x.clone(), true).unwrap())
        .collect();
    let out = build(&mut graph, &leaves);
    let grads = graph.backward(out).unwrap();
    let numeric = central_differences(
        |xs| {
            let mut g = Graph::new();
            let ls: Vec<NodeId> = xs
                .iter()
                .map(|x| g.leaf(x.clone(), false).unwrap())
                .collect();
            let o = build(&mut g, &ls);
            g.value(o).item()
        },
        inputs,
        h,
    );
    let mut worst: f64 = 0.0;
    for (leaf, fd) in leaves.iter().zip(&numeric) {
        let zeros = vec![0.0; fd.len()];
        let ad = grads.get(*leaf).map(|a| a.data()).unwrap_or(&zeros);
        for (a, n) in ad.iter().zip(fd) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    worst
}

/// Mean-pooled, projected, unit-normalized embedding of `text`.
pub fn embed(params: &PolicyParameters, tok: &TokenizerConfig, text: &str) -> Vec<f64> {
    let mut ids = tok.tokenize(text);
    if ids.is_empty() {
        ids.push(tok.unknown_id());
    }
    let de = params.embed_dim();
    let d = params.output_dim();
    let mut pooled = vec![0.0; de];
    for &id in &ids {
        for (c, p) in pooled.iter_mut().enumerate() {
            *p += params.token_embeddings.get(id, c);
        }
    }
    for p in &mut pooled {
        *p /= ids.len() as f64;
    }
    let mut out = vec![0.0; d];
    for (j, o) in out.iter_mut().enumerate() {
        for (c, p) in pooled.iter().enumerate() {
            *o += p * params.projection.get(c, j);
        }
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    out.iter().map(|x| x / norm).collect()
}

/// Token F1 over lowercase whitespace token sets. Sufficient for entity
/// names, which carry no articles or punctuation.
pub fn entity_f1(prediction: &str, gold: &str) -> f64 {
    let p: std::collections::BTreeSet<String> = prediction
        .split_whitespace()
        .map(str::to_lowercase)
        .collect();
    let g: std::collections::BTreeSet<String> =
        gold.split_whitespace().map(str::to_lowercase).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let common = p.intersection(&g).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    2.0 * common / (p.len() + g.len()) as f64
}

/// Distribution of the terminal reward of a sampled one-hop episode with
/// one retrieved document, as `(reward, probability)` outcomes.
///
/// The first state is the question followed by the start entity (or the
/// entity alone when `history` is false). Retrieving the fact
/// `start relation answer` reaches the answer; any other document leaves
/// the episode at the start entity.
#[allow(clippy::too_many_arguments)]
pub fn one_hop_reward_outcomes(
    params: &PolicyParameters,
    doc_params: &PolicyParameters,
    tok: &TokenizerConfig,
    docs: &[Document],
    task: &ChainTask,
    history: bool,
    pool_size: usize,
    temperature: f64,
) -> Vec<(f64, f64)> {
    assert_eq!(task.hops, 1);
    let state = if history {
        format!("q: {} [SEP] q: {}", task.question, task.start)
    } else {
        task.start.clone()
    };
    let s = embed(params, tok, &state);
    let mut scored: Vec<(usize, f64)> = docs
        .iter()
        .map(|d| {
            let e = embed(doc_params, tok, &d.text);
            (d.id, s.iter().zip(&e).map(|(a, b)| a * b).sum())
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(pool_size);
    let logits: Vec<f64> = scored.iter().map(|p| p.1 / temperature).collect();
    let z = log_sum_exp(&logits);
    let gold_fact = format!("{} {} {}", task.start, task.relations[0], task.answer);
    let hit = entity_f1(&task.answer, &task.answer);
    let miss = entity_f1(&task.start, &task.answer);
    scored
        .iter()
        .zip(&logits)
        .map(|((id, _), l)| {
            let r = if docs[*id].text == gold_fact {
                hit
            } else {
                miss
            };
            (r, (l - z).exp())
        })
        .collect()
}

/// Mean and variance of a discrete outcome distribution.
pub fn moments(outcomes: &[(f64, f64)]) -> (f64, f64) {
    let mean: f64 = outcomes.iter().map(|(r, p)| r * p).sum();
    let second: f64 = outcomes.iter().map(|(r, p)| r * r * p).sum();
    (mean, second - mean * mean)
}

/// Answer reached by following `relations` from `start` through the fact
/// documents `subject relation object`.
pub fn follow_chain(docs: &[Document], start: &str, relations: &[String]) -> Option<String> {
    let mut entity = start.to_string();
    for rel in relations {
        let next = docs.iter().find_map(|d| {
            let t: Vec<&str> = d.text.split_whitespace().collect();
            (t.len() == 3 && t[0] == entity && t[1] == rel).then(|| t[2].to_string())
        })?;
        entity = next;
    }
    Some(entity)
}

/// Closed form of an EMA with `y₀ = x₀` on a unit step at `t0 > 0`.
pub fn ema_step_response(t: usize, t0: usize, window: usize) -> f64 {
    let beta = 1.0 - 2.0 / (window as f64 + 1.0);
    if t < t0 {
        0.0
    } else {
        1.0 - beta.powi((t - t0 + 1) as i32)
    }
}
