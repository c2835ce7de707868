//! The command implementations behind the CLI.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{
    index_checkpoint, index_from_checkpoint, sha256_hex, Checkpoint, TrainState,
};
use super::{BackendKind, HarnessError, RunConfig, TrainTasks};
use crate::autodiff::{kernels, Graph};
use crate::corpus::{
    build_index, load_corpus, top_k_exact, write_corpus, Document, EmbeddingIndex,
};
use crate::encoder::{
    embed_text, encode_state, init_params, render_state, DocumentEncoder, PolicyParameters,
    TokenizerConfig, TEMPLATE_VERSION,
};
use crate::env::{
    chainqa_generate, load_tasks, write_tasks, ChainTask, EnvironmentBackend, GeneratedEnv,
    HttpLlmBackend, HttpLlmClient, ScriptedChainQa,
};
use crate::grpo::{
    rollout_group, AdamWState, RngState, RolloutContext, StepMetrics, TrainConfig, Trainer,
};
use crate::policy::{deterministic_rank, pl_log_prob, pl_sample};
use crate::reward::{exact_match, token_f1_with};

type Result<T> = std::result::Result<T, HarnessError>;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

/// Corpus, vocabulary and task splits held in memory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub documents: Vec<Document>,
    pub tokenizer: TokenizerConfig,
    pub train: Vec<ChainTask>,
    pub eval: Vec<ChainTask>,
}

impl Workspace {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let corpus = cfg.corpus_path();
        let documents = load_corpus(&corpus).map_err(|e| match e {
            crate::corpus::CorpusError::Io(source) => HarnessError::Io {
                path: corpus,
                source,
            },
            other => other.into(),
        })?;
        let tokenizer = TokenizerConfig::from_vocab_text(&read_file(&cfg.vocab_path())?)?;
        let train = load_task_file(&cfg.train_tasks_path())?;
        let eval = load_task_file(&cfg.eval_tasks_path())?;
        Ok(Self {
            documents,
            tokenizer,
            train,
            eval,
        })
    }
}

impl From<GeneratedEnv> for Workspace {
    fn from(g: GeneratedEnv) -> Self {
        Self {
            documents: g.documents,
            tokenizer: g.vocabulary,
            train: g.train,
            eval: g.eval,
        }
    }
}

fn load_task_file(path: &Path) -> Result<Vec<ChainTask>> {
    load_tasks(path).map_err(|e| match e {
        crate::env::EnvError::Io(source) => HarnessError::io(path, source),
        other => other.into(),
    })
}

pub fn build_backend(
    cfg: &RunConfig,
    documents: &[Document],
) -> Result<Box<dyn EnvironmentBackend>> {
    Ok(match cfg.backend.kind {
        BackendKind::Scripted => Box::new(ScriptedChainQa::new(
            documents,
            &cfg.env.relations,
            cfg.env.aliasing,
            cfg.env.top_k,
            cfg.env.max_steps,
        )?),
        BackendKind::Http => Box::new(HttpLlmBackend::new(
            HttpLlmClient::new(cfg.backend.http.clone()),
            cfg.backend.prompts.clone(),
            cfg.env.top_k,
            cfg.env.max_steps,
        )),
    })
}

/// Parameters drawn from the run seed; the document encoder is frozen to
/// the same draw.
pub fn initial_state(cfg: &RunConfig, tokenizer: &TokenizerConfig) -> Result<TrainState> {
    let params = init_params(
        cfg.seed,
        tokenizer.vocab_size(),
        cfg.encoder.embed_dim,
        cfg.encoder.output_dim,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    Ok(TrainState {
        doc_encoder: DocumentEncoder::freeze(&params),
        adam: AdamWState::for_params(&params),
        params,
        rng: RngState::capture(&rng),
        step: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// SHA-256 over the environment config and seed.
    pub config_hash: String,
    pub template_version: String,
    pub documents: usize,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenEnvReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

pub fn cmd_gen_env(cfg: &RunConfig) -> Result<GenEnvReport> {
    let generated = chainqa_generate(&cfg.env, cfg.seed)?;
    let env_json = serde_json::to_string(&(&cfg.env, cfg.seed)).expect("env config serializes");
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: sha256_hex(env_json.as_bytes()),
        template_version: TEMPLATE_VERSION.to_string(),
        documents: generated.documents.len(),
        train_tasks: generated.train.len(),
        eval_tasks: generated.eval.len(),
        vocab_size: generated.vocabulary.vocab_size(),
    };

    let mut corpus = Vec::new();
    write_corpus(&mut corpus, &generated.documents)?;
    write_file(&cfg.corpus_path(), &corpus)?;
    for (path, tasks) in [
        (cfg.train_tasks_path(), &generated.train),
        (cfg.eval_tasks_path(), &generated.eval),
    ] {
        let mut buf = Vec::new();
        write_tasks(&mut buf, tasks)?;
        write_file(&path, &buf)?;
    }
    write_file(
        &cfg.vocab_path(),
        generated.vocabulary.to_vocab_text().as_bytes(),
    )?;
    let mut m = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    m.push('\n');
    write_file(&cfg.manifest_path(), m.as_bytes())?;
    Ok(GenEnvReport {
        dir: cfg.data_dir(),
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexReport {
    pub path: PathBuf,
    pub rows: usize,
    pub dim: usize,
    /// SHA-256 of the index file.
    pub hash: String,
}

/// Builds and persists the document index from the frozen encoder in
/// `checkpoint`, or from the seed-derived initialization.
pub fn cmd_index(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<IndexReport> {
    let ws = Workspace::load(cfg)?;
    let encoder = match checkpoint {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(p)?)?.doc_encoder,
        None => initial_state(cfg, &ws.tokenizer)?.doc_encoder,
    };
    let index = build_index(&encoder, &ws.tokenizer, &ws.documents)?;
    let bytes = index_checkpoint(&index).to_bytes();
    let path = cfg.index_path();
    write_file(&path, &bytes)?;
    Ok(IndexReport {
        path,
        rows: index.len(),
        dim: index.dim(),
        hash: sha256_hex(&bytes),
    })
}

fn load_index(cfg: &RunConfig, expected_docs: usize) -> Result<EmbeddingIndex> {
    let path = cfg.index_path();
    if !path.exists() {
        return Err(HarnessError::Usage(format!(
            "{} not found; run `index` first",
            path.display()
        )));
    }
    let index = index_from_checkpoint(&Checkpoint::load(&path)?)?;
    if index.len() != expected_docs {
        return Err(HarnessError::Checkpoint(format!(
            "index has {} rows but the corpus has {expected_docs} documents",
            index.len()
        )));
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterReport {
    pub path: PathBuf,
    pub kept: usize,
    pub dropped: usize,
}

/// Seed of the `i`-th filtering group.
fn filter_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keeps tasks whose rewards over `rollouts` episodes under `params` are not
/// all equal.
pub fn filter_tasks(
    params: &PolicyParameters,
    ctx: RolloutContext<'_>,
    tasks: &[ChainTask],
    cfg: &TrainConfig,
    rollouts: usize,
    seed: u64,
) -> Result<(Vec<ChainTask>, usize)> {
    let group_cfg = TrainConfig {
        group_size: rollouts,
        ..cfg.clone()
    };
    let keep = (0..tasks.len())
        .into_par_iter()
        .map(|i| {
            rollout_group(params, ctx, tasks, i, &group_cfg, filter_seed(seed, i))
                .map(|g| !g.degenerate)
        })
        .collect::<std::result::Result<Vec<bool>, _>>()?;
    let kept: Vec<ChainTask> = tasks
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();
    let dropped = tasks.len() - kept.len();
    Ok((kept, dropped))
}

pub fn cmd_filter(cfg: &RunConfig, rollouts: usize) -> Result<FilterReport> {
    if rollouts < 2 {
        return Err(HarnessError::Usage(
            "filtering needs at least 2 rollouts".into(),
        ));
    }
    let ws = Workspace::load(cfg)?;
    let index = load_index(cfg, ws.documents.len())?;
    let backend = build_backend(cfg, &ws.documents)?;
    let state = initial_state(cfg, &ws.tokenizer)?;
    let ctx = RolloutContext {
        tokenizer: &ws.tokenizer,
        index: &index,
        documents: &ws.documents,
        backend: backend.as_ref(),
    };
    let (kept, dropped) = filter_tasks(
        &state.params,
        ctx,
        &ws.train,
        &cfg.train,
        rollouts,
        cfg.seed,
    )?;
    if kept.is_empty() {
        return Err(HarnessError::EmptyFilter { dropped });
    }
    let mut buf = Vec::new();
    write_tasks(&mut buf, &kept)?;
    let path = cfg.filtered_tasks_path();
    write_file(&path, &buf)?;
    Ok(FilterReport {
        path,
        kept: kept.len(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps_run: usize,
    pub final_step: usize,
    pub last: Option<StepMetrics>,
}

fn save_state(trainer: &Trainer, doc_encoder: &DocumentEncoder, path: &Path) -> Result<()> {
    TrainState {
        params: trainer.params.clone(),
        doc_encoder: doc_encoder.clone(),
        adam: trainer.adam.clone(),
        rng: RngState::capture(&trainer.rng),
        step: trainer.step,
    }
    .to_checkpoint()
    .save(path)
}

/// Metrics lines already written for steps before `step`.
fn metrics_prefix(path: &Path, step: usize) -> Result<String> {
    if step == 0 || !path.exists() {
        return Ok(String::new());
    }
    let mut out = String::new();
    for line in read_file(path)?.lines() {
        let m: StepMetrics = serde_json::from_str(line)
            .map_err(|e| HarnessError::Checkpoint(format!("metrics file: {e}")))?;
        if m.step < step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains up to `train.steps`, optionally continuing from a checkpoint.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainReport> {
    if !cfg.ablation.rl {
        return Err(HarnessError::Usage(
            "ablation.rl = false evaluates the frozen encoder; use `eval` instead of `train`"
                .into(),
        ));
    }
    let ws = Workspace::load(cfg)?;
    let index = load_index(cfg, ws.documents.len())?;
    let tasks = match cfg.train_tasks {
        TrainTasks::All => ws.train.clone(),
        TrainTasks::Filtered => {
            let filtered = cfg.filtered_tasks_path();
            if !filtered.exists() {
                return Err(HarnessError::Usage(format!(
                    "{} not found; run `filter` first or set train_tasks = \"all\"",
                    filtered.display()
                )));
            }
            load_task_file(&filtered)?
        }
    };
    let state = match resume {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(p)?)?,
        None => initial_state(cfg, &ws.tokenizer)?,
    };
    let rebuilt = build_index(&state.doc_encoder, &ws.tokenizer, &ws.documents)?;
    if rebuilt != index {
        return Err(HarnessError::Checkpoint(
            "index file was not built from this run's frozen document encoder".into(),
        ));
    }
    let backend = build_backend(cfg, &ws.documents)?;
    let ctx = RolloutContext {
        tokenizer: &ws.tokenizer,
        index: &index,
        documents: &ws.documents,
        backend: backend.as_ref(),
    };

    let mut trainer = Trainer {
        cfg: cfg.train.clone(),
        rng: state.rng(),
        params: state.params,
        adam: state.adam,
        step: state.step,
    };
    let metrics_path = cfg.metrics_path();
    let prefix = metrics_prefix(&metrics_path, trainer.step)?;
    write_file(&metrics_path, prefix.as_bytes())?;
    let file = File::options()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| HarnessError::io(&metrics_path, e))?;
    let mut out = BufWriter::new(file);

    let checkpoint = cfg.checkpoint_path();
    let start = trainer.step;
    let mut last = None;
    while trainer.step < cfg.train.steps {
        let m = trainer.train_step(ctx, &tasks)?;
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(out, "{line}")
            .and_then(|_| out.flush())
            .map_err(|e| HarnessError::io(&metrics_path, e))?;
        if cfg.checkpoint_every > 0 && trainer.step.is_multiple_of(cfg.checkpoint_every) {
            save_state(&trainer, &state.doc_encoder, &checkpoint)?;
        }
        last = Some(m);
    }
    save_state(&trainer, &state.doc_encoder, &checkpoint)?;
    Ok(TrainReport {
        checkpoint,
        metrics: metrics_path,
        steps_run: trainer.step - start,
        final_step: trainer.step,
        last,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub exact_match: f64,
    pub f1: f64,
    /// Mean terminal reward, which is the answer F1.
    pub mean_reward: f64,
}

/// One episode with deterministic top-k retrieval. Returns the answer.
pub fn run_episode_greedy(
    params: &PolicyParameters,
    ctx: RolloutContext<'_>,
    task: &ChainTask,
    cfg: &TrainConfig,
) -> Result<String> {
    let rendering = cfg.rendering();
    let mut state = ctx.backend.reset(task)?;
    let mut steps = 0;
    while !state.is_terminal() {
        if steps >= ctx.backend.max_steps() {
            return Err(crate::grpo::GrpoError::RunawayEpisode(steps).into());
        }
        let text = render_state(&state.history, &state.query, &rendering)?;
        let v = embed_text(params, ctx.tokenizer, &text)?;
        let pool = top_k_exact(ctx.index, &v, cfg.pool_size)?;
        let action = deterministic_rank(&pool, cfg.top_k).map_err(crate::grpo::GrpoError::from)?;
        let docs: Vec<&Document> = action.doc_ids.iter().map(|&i| &ctx.documents[i]).collect();
        let transition = ctx.backend.step(task, &state, &docs)?;
        state.apply(transition)?;
        steps += 1;
    }
    Ok(state.answer.unwrap_or_default())
}

pub fn evaluate(
    params: &PolicyParameters,
    ctx: RolloutContext<'_>,
    tasks: &[ChainTask],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let scores = tasks
        .par_iter()
        .map(|t| {
            let answer = run_episode_greedy(params, ctx, t, cfg)?;
            Ok((
                exact_match(&answer, &t.answer),
                token_f1_with(&answer, &t.answer, cfg.f1_variant),
            ))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let n = tasks.len().max(1) as f64;
    let em = scores.iter().map(|s| s.0).sum::<f64>() / n;
    let f1 = scores.iter().map(|s| s.1).sum::<f64>() / n;
    Ok(EvalReport {
        tasks: tasks.len(),
        exact_match: em,
        f1,
        mean_reward: f1,
    })
}

/// Evaluates the eval split. With `ablation.rl = false` the frozen initial
/// encoder is used and `checkpoint` is ignored.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let ws = Workspace::load(cfg)?;
    let index = load_index(cfg, ws.documents.len())?;
    let params = if cfg.ablation.rl {
        let path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.checkpoint_path());
        TrainState::from_checkpoint(&Checkpoint::load(&path)?)?.params
    } else {
        initial_state(cfg, &ws.tokenizer)?.params
    };
    let backend = build_backend(cfg, &ws.documents)?;
    let ctx = RolloutContext {
        tokenizer: &ws.tokenizer,
        index: &index,
        documents: &ws.documents,
        backend: backend.as_ref(),
    };
    evaluate(&params, ctx, &ws.eval, &cfg.train)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopTrace {
    pub state_text: String,
    /// Highest-scoring pool members: id, score, text.
    pub pool_top: Vec<(usize, f64, String)>,
    pub action: Vec<usize>,
    pub log_prob: f64,
    pub recomputed_log_prob: f64,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub task_id: usize,
    pub question: String,
    pub gold: String,
    pub hops: Vec<HopTrace>,
    pub answer: String,
    pub reward: f64,
}

impl fmt::Display for RolloutTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task {}: {}", self.task_id, self.question)?;
        for (t, h) in self.hops.iter().enumerate() {
            writeln!(f, "hop {}", t + 1)?;
            writeln!(f, "  state: {}", h.state_text)?;
            for (id, score, text) in &h.pool_top {
                writeln!(f, "  pool {id:>5} {score:+.4} {text}")?;
            }
            writeln!(
                f,
                "  action: {:?} log-prob {:.6} (recomputed {:.6})",
                h.action, h.log_prob, h.recomputed_log_prob
            )?;
            writeln!(f, "  observation: {}", h.observation)?;
        }
        writeln!(f, "answer: {} (gold {})", self.answer, self.gold)?;
        write!(f, "reward: {}", self.reward)
    }
}

const TRACE_POOL_ROWS: usize = 5;

/// Samples one episode of train task `task_id` and records each hop.
pub fn cmd_rollout_debug(
    cfg: &RunConfig,
    task_id: usize,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<RolloutTrace> {
    let ws = Workspace::load(cfg)?;
    let task = ws.train.get(task_id).ok_or(HarnessError::UnknownTask {
        id: task_id,
        count: ws.train.len(),
    })?;
    let index = load_index(cfg, ws.documents.len())?;
    let params = match checkpoint {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(p)?)?.params,
        None => initial_state(cfg, &ws.tokenizer)?.params,
    };
    let backend = build_backend(cfg, &ws.documents)?;
    let tc = &cfg.train;
    let rendering = tc.rendering();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = backend.reset(task)?;
    let mut hops = Vec::new();
    let policy = |e: crate::policy::PolicyError| HarnessError::Train(e.into());
    while !state.is_terminal() {
        if hops.len() >= backend.max_steps() {
            return Err(crate::grpo::GrpoError::RunawayEpisode(hops.len()).into());
        }
        let text = render_state(&state.history, &state.query, &rendering)?;
        let v = embed_text(&params, &ws.tokenizer, &text)?;
        let pool = top_k_exact(&index, &v, tc.pool_size)?;
        let action = pl_sample(&pool, tc.top_k, tc.temperature, &mut rng).map_err(policy)?;
        let mut graph = Graph::new();
        let nodes = params.attach(&mut graph, false)?;
        let s = encode_state(&mut graph, nodes, &ws.tokenizer, &text)?;
        let lp =
            pl_log_prob(&mut graph, s, &index, &pool, &action, tc.temperature).map_err(policy)?;
        let docs: Vec<&Document> = action.doc_ids.iter().map(|&i| &ws.documents[i]).collect();
        let transition = backend.step(task, &state, &docs)?;
        hops.push(HopTrace {
            state_text: text,
            pool_top: pool
                .ids()
                .iter()
                .zip(pool.scores())
                .take(TRACE_POOL_ROWS)
                .map(|(&id, &s)| (id, s, ws.documents[id].text.clone()))
                .collect(),
            log_prob: action.total_log_prob().unwrap_or(f64::NAN),
            recomputed_log_prob: graph.value(lp).item(),
            action: action.doc_ids,
            observation: transition.observation.clone(),
        });
        state.apply(transition)?;
    }
    let answer = state.answer.unwrap_or_default();
    Ok(RolloutTrace {
        task_id,
        question: task.question.clone(),
        gold: task.answer.clone(),
        reward: token_f1_with(&answer, &task.answer, tc.f1_variant),
        answer,
        hops,
    })
}

/// Max deviation of any index row norm from 1.
pub fn index_norm_error(index: &EmbeddingIndex) -> f64 {
    (0..index.len())
        .map(|i| (kernels::norm(index.row(i)) - 1.0).abs())
        .fold(0.0, f64::max)
}
