//! Synthetic multi-hop environment over a layered fact graph.
//!
//! Every entity has one fact document per relation, `"<entity> <relation>
//! <object>"`. Entities sit in layers: question start entities are in layer
//! 0, facts of layer `j` point into layer `j + 1`, and the last layer points
//! into itself. In aliased mode a sub-query is the bare entity name, so each
//! sub-query matches one fact per relation and only the question (carried in
//! the history) says which relation is wanted.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChainTask, EnvError, EnvironmentBackend, EpisodeState, NextStep, Transition};
use crate::corpus::Document;
use crate::encoder::TokenizerConfig;

pub const MISS_OBSERVATION: &str = "no relevant fact found";

const FILLERS: [&str; 4] = ["news", "rumor", "report", "story"];
const ONSETS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AliasingMode {
    /// Sub-queries name only the current entity.
    #[default]
    Aliased,
    /// Sub-queries name the entity and the relation.
    Disambiguated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub entities: usize,
    /// Relation tokens as they appear in fact documents.
    pub relations: Vec<String>,
    /// Question wording for each relation; empty means reuse `relations`.
    pub relation_phrases: Vec<String>,
    pub min_hops: usize,
    pub max_hops: usize,
    /// Distractor documents per fact document.
    pub distractor_rate: f64,
    /// Documents consumed per hop.
    pub top_k: usize,
    pub aliasing: AliasingMode,
    /// Maximum retrieval steps per episode.
    pub max_steps: usize,
    /// Fraction of start entities whose questions go to the eval split.
    pub eval_fraction: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            relations: vec!["founder".into(), "location".into()],
            relation_phrases: vec!["creator".into(), "place".into()],
            min_hops: 1,
            max_hops: 2,
            distractor_rate: 0.1,
            top_k: 3,
            aliasing: AliasingMode::Aliased,
            max_steps: 4,
            eval_fraction: 0.2,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: String| Err(EnvError::Config(m));
        if self.relations.is_empty() {
            return fail("at least one relation is required".into());
        }
        let unique: HashSet<&String> = self.relations.iter().collect();
        if unique.len() != self.relations.len() {
            return fail("relation names must be distinct".into());
        }
        if !self.relation_phrases.is_empty() && self.relation_phrases.len() != self.relations.len()
        {
            return fail("relation_phrases must match relations in length".into());
        }
        for word in self.relations.iter().chain(&self.relation_phrases) {
            if word.is_empty() || word.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return fail(format!(
                    "relation word {word:?} must be a single lowercase token"
                ));
            }
        }
        if self.min_hops == 0 || self.min_hops > self.max_hops {
            return fail(format!(
                "hop range {}..={} is empty or starts at 0",
                self.min_hops, self.max_hops
            ));
        }
        if self.max_hops > self.max_steps {
            return fail(format!(
                "max_hops {} exceeds max_steps {}",
                self.max_hops, self.max_steps
            ));
        }
        if self.entities < self.max_hops + 1 {
            return fail(format!(
                "{} entities cannot fill {} layers",
                self.entities,
                self.max_hops + 1
            ));
        }
        if self.top_k == 0 {
            return fail("top_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return fail("distractor_rate must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return fail("eval_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    fn phrase(&self, relation: usize) -> &str {
        self.relation_phrases
            .get(relation)
            .unwrap_or(&self.relations[relation])
    }

    /// Question text for a relation chain applied to `start`, outermost
    /// relation first.
    pub fn question(&self, start: &str, relations: &[usize]) -> String {
        let phrases: Vec<&str> = relations.iter().rev().map(|&r| self.phrase(r)).collect();
        format!("what is the {} of {start}", phrases.join(" of the "))
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedEnv {
    pub documents: Vec<Document>,
    pub train: Vec<ChainTask>,
    pub eval: Vec<ChainTask>,
    pub vocabulary: TokenizerConfig,
}

fn entity_names(n: usize, reserved: &HashSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = reserved.clone();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = if n > 2000 { 4 } else { 3 };
        let mut name = String::with_capacity(syllables * 2);
        for _ in 0..syllables {
            name.push(ONSETS[rng.random_range(0..ONSETS.len())] as char);
            name.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
        }
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

fn layer_sizes(entities: usize, layers: usize) -> Vec<usize> {
    let first = (entities / 2).max(1).min(entities - (layers - 1));
    let rest = entities - first;
    let tail = layers - 1;
    let mut sizes = vec![first];
    for j in 0..tail {
        sizes.push(rest / tail + usize::from(j < rest % tail));
    }
    sizes
}

/// Generates the corpus, train/eval task splits and vocabulary.
pub fn chainqa_generate(cfg: &EnvConfig, seed: u64) -> Result<GeneratedEnv, EnvError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let reserved: HashSet<String> = cfg
        .relations
        .iter()
        .chain(&cfg.relation_phrases)
        .cloned()
        .chain(FILLERS.iter().map(|s| s.to_string()))
        .chain(["what", "is", "the", "of", "no", "relevant", "fact", "found"].map(String::from))
        .collect();
    let names = entity_names(cfg.entities, &reserved, &mut rng);

    let sizes = layer_sizes(cfg.entities, cfg.max_hops + 1);
    let mut layers: Vec<&[String]> = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for s in &sizes {
        layers.push(&names[offset..offset + s]);
        offset += s;
    }

    // (subject, relation index) -> object
    let mut objects: HashMap<(usize, usize), usize> = HashMap::new();
    let mut fact_texts = Vec::new();
    let mut base = 0;
    for (j, layer) in layers.iter().enumerate() {
        let last = j + 1 == layers.len();
        let (target_base, target_len) = if last {
            (base, layer.len())
        } else {
            (base + layer.len(), layers[j + 1].len())
        };
        for local in 0..layer.len() {
            let subject = base + local;
            for r in 0..cfg.relations.len() {
                let object = if last && target_len > 1 {
                    // self-loops only when the sink layer has a single entity
                    let mut o = target_base + rng.random_range(0..target_len - 1);
                    if o >= subject {
                        o += 1;
                    }
                    o
                } else {
                    target_base + rng.random_range(0..target_len)
                };
                objects.insert((subject, r), object);
                fact_texts.push(format!(
                    "{} {} {}",
                    names[subject], cfg.relations[r], names[object]
                ));
            }
        }
        base += layer.len();
    }

    let n_distractors = (cfg.distractor_rate * fact_texts.len() as f64).round() as usize;
    let mut texts = fact_texts;
    for _ in 0..n_distractors {
        let a = rng.random_range(0..names.len());
        let mut b = rng.random_range(0..names.len());
        if b == a && names.len() > 1 {
            b = (b + 1) % names.len();
        }
        let filler = FILLERS[rng.random_range(0..FILLERS.len())];
        texts.push(format!("{} {filler} {}", names[a], names[b]));
    }
    texts.shuffle(&mut rng);
    let documents: Vec<Document> = texts
        .into_iter()
        .enumerate()
        .map(|(id, text)| Document { id, text })
        .collect();

    let mut starts: Vec<usize> = (0..sizes[0]).collect();
    starts.shuffle(&mut rng);
    let n_eval = (cfg.eval_fraction * sizes[0] as f64).round() as usize;
    let eval_starts: HashSet<usize> = starts[..n_eval].iter().copied().collect();

    let mut train = Vec::new();
    let mut eval = Vec::new();
    for start in 0..sizes[0] {
        for hops in cfg.min_hops..=cfg.max_hops {
            let combos = cfg.relations.len().pow(hops as u32);
            for code in 0..combos {
                let mut chain = Vec::with_capacity(hops);
                let mut c = code;
                for _ in 0..hops {
                    chain.push(c % cfg.relations.len());
                    c /= cfg.relations.len();
                }
                chain.reverse();
                let mut entity = start;
                for &r in &chain {
                    entity = objects[&(entity, r)];
                }
                let task = ChainTask {
                    question: cfg.question(&names[start], &chain),
                    answer: names[entity].clone(),
                    start: names[start].clone(),
                    relations: chain.iter().map(|&r| cfg.relations[r].clone()).collect(),
                    hops,
                };
                if eval_starts.contains(&start) {
                    eval.push(task);
                } else {
                    train.push(task);
                }
            }
        }
    }

    let vocabulary = TokenizerConfig::build(
        documents
            .iter()
            .map(|d| d.text.as_str())
            .chain(train.iter().chain(&eval).map(|t| t.question.as_str()))
            .chain(std::iter::once(MISS_OBSERVATION))
            .chain(cfg.relations.iter().map(String::as_str)),
    );

    Ok(GeneratedEnv {
        documents,
        train,
        eval,
        vocabulary,
    })
}

/// Follows `relations` from `start` through fact documents parsed from the
/// corpus. Returns `None` if a fact is missing.
pub fn graph_walk(documents: &[Document], start: &str, relations: &[String]) -> Option<String> {
    let mut entity = start.to_string();
    for r in relations {
        entity = documents.iter().find_map(|d| {
            let t: Vec<&str> = d.text.split_whitespace().collect();
            (t.len() == 3 && t[0] == entity && t[1] == r).then(|| t[2].to_string())
        })?;
    }
    Some(entity)
}

#[derive(Debug, Clone)]
struct Fact {
    doc_id: usize,
    object: String,
}

/// Rule-based backend over the fact documents of a corpus.
#[derive(Debug, Clone)]
pub struct ScriptedChainQa {
    facts: HashMap<(String, String), Fact>,
    texts: Vec<String>,
    mode: AliasingMode,
    top_k: usize,
    max_steps: usize,
}

impl ScriptedChainQa {
    /// Indexes every three-token document whose middle token is a relation.
    pub fn new(
        documents: &[Document],
        relations: &[String],
        mode: AliasingMode,
        top_k: usize,
        max_steps: usize,
    ) -> Result<Self, EnvError> {
        if top_k == 0 || max_steps == 0 {
            return Err(EnvError::Config(
                "top_k and max_steps must be positive".into(),
            ));
        }
        let relset: HashSet<&str> = relations.iter().map(String::as_str).collect();
        let mut facts = HashMap::new();
        for d in documents {
            let t: Vec<&str> = d.text.split_whitespace().collect();
            if t.len() == 3 && relset.contains(t[1]) {
                let key = (t[0].to_string(), t[1].to_string());
                let fact = Fact {
                    doc_id: d.id,
                    object: t[2].to_string(),
                };
                if facts.insert(key, fact).is_some() {
                    return Err(EnvError::Corpus(format!(
                        "duplicate fact for ({}, {})",
                        t[0], t[1]
                    )));
                }
            }
        }
        Ok(Self {
            facts,
            texts: documents.iter().map(|d| d.text.clone()).collect(),
            mode,
            top_k,
            max_steps,
        })
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Document id of the fact `(entity, relation)`, if present.
    pub fn fact_doc(&self, entity: &str, relation: &str) -> Option<usize> {
        self.facts
            .get(&(entity.to_string(), relation.to_string()))
            .map(|f| f.doc_id)
    }

    fn sub_query(&self, entity: &str, relation: &str) -> String {
        match self.mode {
            AliasingMode::Aliased => entity.to_string(),
            AliasingMode::Disambiguated => format!("{entity} {relation}"),
        }
    }

    /// Entity reached after the observations recorded in `state`.
    fn current_entity(&self, task: &ChainTask, state: &EpisodeState) -> String {
        let mut entity = task.start.clone();
        for (i, obs) in state.observations().enumerate() {
            if obs == MISS_OBSERVATION {
                continue;
            }
            if let Some(f) = self.facts.get(&(entity.clone(), task.relations[i].clone())) {
                if self.texts[f.doc_id] == obs {
                    entity = f.object.clone();
                }
            }
        }
        entity
    }
}

impl EnvironmentBackend for ScriptedChainQa {
    fn reset(&self, task: &ChainTask) -> Result<EpisodeState, EnvError> {
        task.validate(self.max_steps)?;
        Ok(EpisodeState::new(
            task.question.clone(),
            self.sub_query(&task.start, &task.relations[0]),
        ))
    }

    fn step(
        &self,
        task: &ChainTask,
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
        let t = state.hop;
        if t == 0 || t > task.hops {
            return Err(EnvError::Task(format!("hop {t} outside 1..={}", task.hops)));
        }
        let mut entity = self.current_entity(task, state);
        let relation = &task.relations[t - 1];
        let hit = self
            .facts
            .get(&(entity.clone(), relation.clone()))
            .filter(|f| retrieved.iter().any(|d| d.id == f.doc_id));
        let observation = match hit {
            Some(f) => {
                entity = f.object.clone();
                self.texts[f.doc_id].clone()
            }
            None => MISS_OBSERVATION.to_string(),
        };
        let next = if t >= task.hops || t >= self.max_steps {
            NextStep::Answer(entity)
        } else {
            NextStep::Query(self.sub_query(&entity, &task.relations[t]))
        };
        Ok(Transition { observation, next })
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }
}
