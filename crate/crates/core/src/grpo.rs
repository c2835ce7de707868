//! Group-relative policy optimization of the state encoder.
//!
//! Each training step samples a batch of tasks, rolls out `G` episodes per
//! task under the current parameters, normalizes terminal rewards within each
//! group, and takes one AdamW step on the negated clipped surrogate. There is
//! no value network and no KL penalty.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, NodeId};
use crate::corpus::{top_k_exact, CandidatePool, CorpusError, Document, EmbeddingIndex};
use crate::encoder::{
    embed_text, encode_state, render_state, EncoderError, PolicyParameters, RenderMode,
    StateRendering, TokenizerConfig,
};
use crate::env::{ChainTask, EnvError, EnvironmentBackend};
use crate::policy::{pl_log_prob, pl_sample, PolicyError, RankedAction};
use crate::reward::{token_f1_with, F1Variant};

/// Reward groups with population std below this are degenerate.
pub const STD_GUARD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("advantages need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("every group in the batch is degenerate")]
    AllDegenerate,
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("parameter/gradient shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("episode exceeded {0} steps")]
    RunawayEpisode(usize),
    #[error("rollout of task {task}, member {member}: {source}")]
    Rollout {
        task: usize,
        member: usize,
        #[source]
        source: Box<GrpoError>,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = GrpoError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub temperature: f64,
    /// Documents retrieved per hop.
    pub top_k: usize,
    /// Candidate pool size.
    pub pool_size: usize,
    pub learning_rate: f64,
    /// Task groups per step.
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub render_mode: RenderMode,
    pub max_state_tokens: usize,
    pub f1_variant: F1Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            temperature: 0.05,
            top_k: 3,
            pool_size: 30,
            learning_rate: 1e-5,
            batch_size: 16,
            steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            render_mode: RenderMode::HistoryAware,
            max_state_tokens: 128,
            f1_variant: F1Variant::Set,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(GrpoError::Config(m.into()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("clip_epsilon must lie in (0, 1)");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        if self.top_k == 0 || self.top_k > self.pool_size {
            return fail("need 1 <= top_k <= pool_size");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("AdamW betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return fail("adam_eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn rendering(&self) -> StateRendering {
        StateRendering::new(self.render_mode, self.max_state_tokens)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Read-only inputs shared by every rollout.
#[derive(Clone, Copy)]
pub struct RolloutContext<'a> {
    pub tokenizer: &'a TokenizerConfig,
    pub index: &'a EmbeddingIndex,
    pub documents: &'a [Document],
    pub backend: &'a dyn EnvironmentBackend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state_text: String,
    pub pool: CandidatePool,
    pub action: RankedAction,
    /// Total log-probability of `action` when it was sampled.
    pub old_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub answer: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_index: usize,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }
}

/// Plays one episode, sampling each hop's ranking from the policy.
pub fn rollout_episode<R: Rng + ?Sized>(
    params: &PolicyParameters,
    ctx: RolloutContext<'_>,
    task: &ChainTask,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let rendering = cfg.rendering();
    let mut state = ctx.backend.reset(task)?;
    let mut steps = Vec::new();
    while !state.is_terminal() {
        if steps.len() >= ctx.backend.max_steps() {
            return Err(GrpoError::RunawayEpisode(ctx.backend.max_steps()));
        }
        let text = render_state(&state.history, &state.query, &rendering)?;
        let v = embed_text(params, ctx.tokenizer, &text)?;
        let pool = top_k_exact(ctx.index, &v, cfg.pool_size)?;
        let action = pl_sample(&pool, cfg.top_k, cfg.temperature, rng)?;
        let docs: Vec<&Document> = action.doc_ids.iter().map(|&i| &ctx.documents[i]).collect();
        let transition = ctx.backend.step(task, &state, &docs)?;
        state.apply(transition)?;
        let old_log_prob = action
            .total_log_prob()
            .expect("sampled actions carry log-probs");
        steps.push(TrajectoryStep {
            state_text: text,
            pool,
            action,
            old_log_prob,
        });
    }
    let answer = state.answer.unwrap_or_default();
    let reward = token_f1_with(&answer, &task.answer, cfg.f1_variant);
    Ok(Trajectory {
        steps,
        answer,
        reward,
    })
}

/// Member `m` of a group draws from stream `m` of a generator seeded with
/// `group_seed`, so groups are reproducible regardless of thread count.
pub fn member_rng(group_seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(group_seed);
    rng.set_stream(member as u64);
    rng
}

/// `G` independent episodes for one task, run in parallel.
pub fn rollout_group(
    params: &PolicyParameters,
    ctx: RolloutContext<'_>,
    tasks: &[ChainTask],
    task_index: usize,
    cfg: &TrainConfig,
    group_seed: u64,
) -> Result<RolloutGroup> {
    let task = &tasks[task_index];
    let trajectories = (0..cfg.group_size)
        .into_par_iter()
        .map(|m| {
            rollout_episode(params, ctx, task, cfg, &mut member_rng(group_seed, m)).map_err(|e| {
                GrpoError::Rollout {
                    task: task_index,
                    member: m,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
    let (advantages, degenerate) = if rewards.len() >= 2 {
        advantages(&rewards)?
    } else {
        (vec![0.0; rewards.len()], true)
    };
    Ok(RolloutGroup {
        task_index,
        trajectories,
        advantages,
        degenerate,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group-normalized advantages and the degenerate flag.
pub fn advantages(rewards: &[f64]) -> Result<(Vec<f64>, bool)> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let (mean, std) = mean_std(rewards);
    if std < STD_GUARD {
        return Ok((vec![0.0; rewards.len()], true));
    }
    Ok((rewards.iter().map(|r| (r - mean) / std).collect(), false))
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)A)` on plain numbers.
pub fn surrogate_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    /// Scalar node holding `-J`.
    pub loss: NodeId,
    pub value: f64,
    /// Fraction of steps whose ratio lies outside `[1-ε, 1+ε]`.
    pub clip_fraction: f64,
    pub groups_used: usize,
}

/// Builds `-J` over the non-degenerate groups of a batch.
pub fn grpo_loss(
    graph: &mut Graph,
    params: crate::encoder::ParamNodes,
    tokenizer: &TokenizerConfig,
    index: &EmbeddingIndex,
    groups: &[RolloutGroup],
    cfg: &TrainConfig,
) -> Result<LossOutput> {
    let live: Vec<&RolloutGroup> = groups.iter().filter(|g| !g.degenerate).collect();
    if live.is_empty() {
        return Err(GrpoError::AllDegenerate);
    }
    let eps = cfg.clip_epsilon;
    let mut terms = Vec::new();
    let mut clipped = 0usize;
    let mut total = 0usize;
    for group in &live {
        let g = group.trajectories.len() as f64;
        for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
            let weight = 1.0 / (live.len() as f64 * g * traj.steps.len() as f64);
            for step in &traj.steps {
                let state = encode_state(graph, params, tokenizer, &step.state_text)?;
                let lp = pl_log_prob(
                    graph,
                    state,
                    index,
                    &step.pool,
                    &step.action,
                    cfg.temperature,
                )?;
                let diff = graph.add_scalar(lp, -step.old_log_prob)?;
                let ratio = graph.exp(diff)?;
                let rho = graph.value(ratio).item();
                total += 1;
                if !(1.0 - eps..=1.0 + eps).contains(&rho) {
                    clipped += 1;
                }
                let unclipped = graph.scale(ratio, adv)?;
                let bounded = graph.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
                let bounded = graph.scale(bounded, adv)?;
                let term = graph.minimum(unclipped, bounded)?;
                terms.push(graph.scale(term, weight)?);
            }
        }
    }
    let objective = graph.add(&terms)?;
    let loss = graph.scale(objective, -1.0)?;
    let value = graph.value(loss).item();
    Ok(LossOutput {
        loss,
        value,
        clip_fraction: clipped as f64 / total as f64,
        groups_used: live.len(),
    })
}

/// Global L2 norm over all gradient arrays.
pub fn grad_norm(grads: &[&Array]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|s| Array::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Array::zeros(s.to_vec())).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &PolicyParameters) -> Self {
        let [e, p] = params.arrays();
        Self::new(&[e.shape(), p.shape()])
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(
    params: &mut [&mut Array],
    grads: &[&Array],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(GrpoError::ShapeMismatch(
            vec![params.len()],
            vec![grads.len(), state.m.len()],
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(GrpoError::ShapeMismatch(
                p.shape().to_vec(),
                g.shape().to_vec(),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.data_mut();
        for j in 0..w.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            w[j] -=
                cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w[j]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub degenerate_fraction: f64,
    /// No update was taken because every group was degenerate.
    pub skipped: bool,
}

/// Serializable generator position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Owns the trainable state: parameters, optimizer moments, generator and
/// step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: PolicyParameters,
    pub adam: AdamWState,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, params: PolicyParameters, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamWState::for_params(&params);
        Ok(Self {
            cfg,
            params,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    /// Task indices and group seeds for the next batch.
    fn draw_batch(&mut self, n_tasks: usize) -> Vec<(usize, u64)> {
        let picks: Vec<usize> = if n_tasks >= self.cfg.batch_size {
            sample(&mut self.rng, n_tasks, self.cfg.batch_size).into_vec()
        } else {
            (0..self.cfg.batch_size)
                .map(|_| self.rng.random_range(0..n_tasks))
                .collect()
        };
        picks.into_iter().map(|i| (i, self.rng.random())).collect()
    }

    /// Collects one batch under the current parameters and takes at most one
    /// optimizer step.
    pub fn train_step(
        &mut self,
        ctx: RolloutContext<'_>,
        tasks: &[ChainTask],
    ) -> Result<StepMetrics> {
        if tasks.is_empty() {
            return Err(GrpoError::Config("no training tasks".into()));
        }
        let batch = self.draw_batch(tasks.len());
        let groups = batch
            .iter()
            .map(|&(ti, seed)| rollout_group(&self.params, ctx, tasks, ti, &self.cfg, seed))
            .collect::<Result<Vec<_>>>()?;

        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let degenerate = groups.iter().filter(|g| g.degenerate).count();
        let mut metrics = StepMetrics {
            step: self.step,
            mean_reward,
            loss: 0.0,
            grad_norm: 0.0,
            clip_fraction: 0.0,
            degenerate_fraction: degenerate as f64 / groups.len() as f64,
            skipped: degenerate == groups.len(),
        };
        self.step += 1;
        if metrics.skipped {
            return Ok(metrics);
        }

        let mut graph = Graph::new();
        let nodes = self.params.attach(&mut graph, true)?;
        let out = grpo_loss(
            &mut graph,
            nodes,
            ctx.tokenizer,
            ctx.index,
            &groups,
            &self.cfg,
        )?;
        if !out.value.is_finite() {
            return Err(GrpoError::NonFiniteLoss(out.value));
        }
        let mut grads = graph.backward(out.loss)?;
        let zero_e = Array::zeros(self.params.token_embeddings.shape().to_vec());
        let zero_p = Array::zeros(self.params.projection.shape().to_vec());
        let ge = grads.remove(nodes.token_embeddings).unwrap_or(zero_e);
        let gp = grads.remove(nodes.projection).unwrap_or(zero_p);
        metrics.loss = out.value;
        metrics.clip_fraction = out.clip_fraction;
        metrics.grad_norm = grad_norm(&[&ge, &gp]);
        let adamw = self.cfg.adamw();
        adamw_step(
            &mut self.params.arrays_mut(),
            &[&ge, &gp],
            &mut self.adam,
            &adamw,
        )?;
        Ok(metrics)
    }
}
