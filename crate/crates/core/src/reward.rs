//! Answer normalization, token F1 and exact match.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Normalized answer tokens: lowercase, punctuation stripped, articles
/// removed, whitespace split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedAnswer(pub Vec<String>);

impl NormalizedAnswer {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }
}

pub fn normalize_answer(text: &str) -> NormalizedAnswer {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    NormalizedAnswer(
        stripped
            .split_whitespace()
            .filter(|t| !ARTICLES.contains(t))
            .map(str::to_string)
            .collect(),
    )
}

/// How token overlap is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Variant {
    /// Overlap of token sets.
    #[default]
    Set,
    /// Overlap of token multisets (the usual SQuAD script).
    Multiset,
}

/// Token F1 over normalized token sets.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    token_f1_with(prediction, gold, F1Variant::Set)
}

pub fn token_f1_with(prediction: &str, gold: &str, variant: F1Variant) -> f64 {
    let p = normalize_answer(prediction).0;
    let g = normalize_answer(gold).0;
    match variant {
        F1Variant::Set => {
            let ps: HashSet<&String> = p.iter().collect();
            let gs: HashSet<&String> = g.iter().collect();
            f1_from_counts(ps.intersection(&gs).count(), ps.len(), gs.len())
        }
        F1Variant::Multiset => {
            let mut counts: HashMap<&String, usize> = HashMap::new();
            for t in &g {
                *counts.entry(t).or_default() += 1;
            }
            let mut common = 0;
            for t in &p {
                if let Some(c) = counts.get_mut(t) {
                    if *c > 0 {
                        *c -= 1;
                        common += 1;
                    }
                }
            }
            f1_from_counts(common, p.len(), g.len())
        }
    }
}

fn f1_from_counts(common: usize, pred: usize, gold: usize) -> f64 {
    match (pred, gold) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * common as f64 / (pred + gold) as f64,
    }
}

/// 1 iff the normalized token sequences are identical.
pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// Sparse terminal reward: F1 on the terminal step `t == last`, else 0.
pub fn terminal_reward(answer: &str, gold: &str, t: usize, last: usize, variant: F1Variant) -> f64 {
    if t == last {
        token_f1_with(answer, gold, variant)
    } else {
        0.0
    }
}
