//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Tolerances and runtime budgets are
//! pinned below.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retrl::autodiff::{Array, Graph, NodeId};
use retrl::corpus::{build_index, top_k_exact, CandidatePool, Document, EmbeddingIndex};
use retrl::encoder::{
    embed_text, init_params, DocumentEncoder, ParamNodes, PolicyParameters, RenderMode,
    TokenizerConfig,
};
use retrl::env::{chainqa_generate, AliasingMode, ChainTask, EnvConfig, ScriptedChainQa};
use retrl::grpo::{
    advantages, grpo_loss, rollout_episode, rollout_group, surrogate_term, GrpoError,
    RolloutContext, RolloutGroup, TrainConfig, Trainer, Trajectory, TrajectoryStep,
};
use retrl::harness::{
    cmd_filter, cmd_gen_env, cmd_index, cmd_train, ema_smooth, evaluate, filter_tasks, Checkpoint,
    RunConfig, TrainState,
};
use retrl::policy::{enumerate_action_probs, pl_log_prob, pl_sample, RankedAction};
use retrl::reward::{exact_match, normalize_answer, terminal_reward, token_f1, F1Variant};

const PL_TOL: f64 = 1e-9;
const SAMPLE_DRAWS: usize = 200_000;
const SAMPLE_COVERAGE: f64 = 0.95;
const FD_STEP: f64 = 1e-6;
const PRIMITIVE_FD_TOL: f64 = 1e-5;
const COMPOSED_FD_TOL: f64 = 1e-3;
const SURROGATE_TOL: f64 = 1e-10;
const ADV_MEAN_TOL: f64 = 1e-12;
const ADV_STD_TOL: f64 = 1e-9;
const EMA_TOL: f64 = 1e-12;
const SIGMAS: f64 = 3.0;
const TARGET_F1: f64 = 0.90;
const HISTORY_MARGIN: f64 = 0.20;
const E2E_STEPS: usize = 500;
const E2E_LR: f64 = 1e-3;
const E2E_SEEDS: [u64; 3] = [1, 2, 3];
const BASELINE_ROLLOUTS: usize = 64;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_array(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scores as a `1×n` state against an identity index: `state · e_i = s_i`.
fn identity_setup(scores: &[f64]) -> (EmbeddingIndex, Array) {
    let n = scores.len();
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    (
        EmbeddingIndex::from_matrix(Array::new(vec![n, n], eye).unwrap()),
        Array::row(scores.to_vec()).unwrap(),
    )
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_sum: f64 = 0.0;
    let mut worst_list: f64 = 0.0;
    let mut lists = 0;
    for n in 1..=6 {
        for k in 1..=n.min(3) {
            for trial in 0..20 {
                let temperature = [0.05, 0.3, 1.0][trial % 3];
                let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let ids: Vec<usize> = (0..n).collect();
                let lib = enumerate_action_probs(&ids, &scores, k, temperature)
                    .map_err(|e| e.to_string())?;
                let oracle = common::ranking_probs(&scores, k, temperature);
                ensure(lib.len() == oracle.len(), || {
                    format!("n={n} k={k}: {} lists vs {}", lib.len(), oracle.len())
                })?;
                worst_sum = worst_sum.max((lib.values().sum::<f64>() - 1.0).abs());
                let (index, state) = identity_setup(&scores);
                let pool = CandidatePool::new(ids.clone(), scores.clone());
                for (list, p) in &oracle {
                    let lp = lib.get(list).copied().unwrap_or(f64::NAN);
                    let mut g = Graph::new();
                    let s = g.leaf(state.clone(), false).unwrap();
                    let action = RankedAction {
                        doc_ids: list.clone(),
                        log_probs: None,
                    };
                    let node = pl_log_prob(&mut g, s, &index, &pool, &action, temperature)
                        .map_err(|e| e.to_string())?;
                    let exact = g.value(node).item().exp();
                    worst_list = worst_list.max((lp - p).abs()).max((exact - p).abs());
                    lists += 1;
                }
            }
        }
    }
    ensure(worst_sum <= PL_TOL && worst_list <= PL_TOL, || {
        format!("max |sum-1| {worst_sum:.2e}, max list error {worst_list:.2e}")
    })?;
    Ok(format!(
        "{lists} lists; max |sum-1| {worst_sum:.2e}, max |exp(log p) - p| {worst_list:.2e}"
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut within = 0usize;
    let mut total = 0usize;
    for instance in 0..20u64 {
        let temperature = [0.25, 0.5, 1.0][instance as usize % 3];
        let scores: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pool = CandidatePool::new((0..5).collect(), scores.clone());
        let oracle = common::ranking_probs(&scores, 2, temperature);
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let mut draw_rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        for _ in 0..SAMPLE_DRAWS {
            let a = pl_sample(&pool, 2, temperature, &mut draw_rng).map_err(|e| e.to_string())?;
            *counts.entry(a.doc_ids).or_default() += 1;
        }
        let n = SAMPLE_DRAWS as f64;
        for (list, p) in &oracle {
            let freq = counts.get(list).copied().unwrap_or(0) as f64 / n;
            let sigma = (p * (1.0 - p) / n).sqrt();
            if (freq - p).abs() <= SIGMAS * sigma {
                within += 1;
            }
            total += 1;
        }
        ensure(counts.keys().all(|l| oracle.contains_key(l)), || {
            "sampled a list outside the enumeration".into()
        })?;
    }
    let coverage = within as f64 / total as f64;
    ensure(coverage >= SAMPLE_COVERAGE, || {
        format!("{within}/{total} lists within 3 sigma ({coverage:.3})")
    })?;
    Ok(format!(
        "{within}/{total} lists within 3 sigma over 20 x {SAMPLE_DRAWS} draws"
    ))
}

/// Reduces any node to a scalar: columns weighted by a fixed random vector,
/// then summed.
fn reduce(g: &mut Graph, y: NodeId) -> NodeId {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = random_array(&mut rng, vec![shape[1], 1], -1.0, 1.0);
    let w = g.leaf(w, false).unwrap();
    let proj = g.matmul(y, w).unwrap();
    g.sum(proj).unwrap()
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Build, Vec<Array>)> {
    let mut r = |shape: Vec<usize>| random_array(rng, shape, -1.0, 1.0);
    vec![
        (
            "matmul",
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1]).unwrap();
                reduce(g, y)
            }),
            vec![r(vec![3, 4]), r(vec![4, 2])],
        ),
        (
            "row_mean",
            Box::new(|g, x| {
                let y = g.row_mean(x[0]).unwrap();
                reduce(g, y)
            }),
            vec![r(vec![3, 4])],
        ),
        (
            "gather_rows",
            Box::new(|g, x| {
                let y = g.gather_rows(x[0], &[0, 2, 2, 4]).unwrap();
                reduce(g, y)
            }),
            vec![r(vec![5, 3])],
        ),
        (
            "unit_normalize",
            Box::new(|g, x| {
                let y = g.unit_normalize(x[0]).unwrap();
                reduce(g, y)
            }),
            vec![r(vec![1, 5])],
        ),
        (
            "dot",
            Box::new(|g, x| g.dot(x[0], x[1]).unwrap()),
            vec![r(vec![1, 5]), r(vec![1, 5])],
        ),
        (
            "masked_log_softmax",
            Box::new(|g, x| {
                let mask = [false, true, false, false, true, false];
                let y = g.masked_log_softmax(x[0], &mask, 0.3).unwrap();
                let picks: Vec<NodeId> = [0, 2, 3, 5]
                    .iter()
                    .enumerate()
                    .map(|(w, &i)| {
                        let p = g.pick(y, i).unwrap();
                        g.scale(p, 0.5 + w as f64).unwrap()
                    })
                    .collect();
                g.add(&picks).unwrap()
            }),
            vec![r(vec![1, 6])],
        ),
        (
            "pick",
            Box::new(|g, x| {
                let y = g.pick(x[0], 4).unwrap();
                g.scale(y, 2.5).unwrap()
            }),
            vec![r(vec![2, 3])],
        ),
        (
            "sum",
            Box::new(|g, x| g.sum(x[0]).unwrap()),
            vec![r(vec![2, 3])],
        ),
        (
            "add",
            Box::new(|g, x| {
                let y = g.add(&[x[0], x[1], x[2]]).unwrap();
                reduce(g, y)
            }),
            vec![r(vec![2, 2]), r(vec![2, 2]), r(vec![2, 2])],
        ),
        (
            "scale",
            Box::new(|g, x| {
                let y = g.scale(x[0], -1.7).unwrap();
                reduce(g, y)
            }),
            vec![r(vec![2, 3])],
        ),
        (
            "add_scalar",
            Box::new(|g, x| {
                let y = g.add_scalar(x[0], 0.4).unwrap();
                let y = g.exp(y).unwrap();
                reduce(g, y)
            }),
            vec![r(vec![2, 3])],
        ),
        (
            "exp",
            Box::new(|g, x| {
                let y = g.exp(x[0]).unwrap();
                reduce(g, y)
            }),
            vec![r(vec![2, 3])],
        ),
        (
            "clamp",
            Box::new(|g, x| {
                let y = g.clamp(x[0], -0.5, 0.5).unwrap();
                reduce(g, y)
            }),
            vec![Array::from_rows(&[vec![-0.9, -0.3, 0.1], vec![0.45, 0.8, -0.55]]).unwrap()],
        ),
        (
            "minimum",
            Box::new(|g, x| {
                let y = g.minimum(x[0], x[1]).unwrap();
                reduce(g, y)
            }),
            vec![
                Array::from_rows(&[vec![0.3, -0.2, 0.9], vec![-0.7, 0.1, 0.5]]).unwrap(),
                Array::from_rows(&[vec![0.1, 0.4, 0.6], vec![-0.2, -0.3, 0.8]]).unwrap(),
            ],
        ),
    ]
}

/// Frozen tiny instance: vocabulary of 20, dimension 8, pool 4, k = 2,
/// one group of two one-hop trajectories.
struct Tiny {
    tok: TokenizerConfig,
    docs: Vec<Document>,
    params: PolicyParameters,
    index: EmbeddingIndex,
    task: ChainTask,
    cfg: TrainConfig,
    state_text: String,
    pool: CandidatePool,
}

impl Tiny {
    fn new() -> Self {
        let texts = [
            "acme founder bob",
            "bob founder cal",
            "acme location dan",
            "cal location eve",
            "dan founder fay",
            "eve location gus",
            "fay location hal",
            "gus founder ivy",
        ];
        let docs: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(id, t)| Document {
                id,
                text: t.to_string(),
            })
            .collect();
        let question = "what is the creator of acme";
        let tok = TokenizerConfig::build(texts.iter().copied().chain([question]));
        assert_eq!(tok.vocab_size(), 20);
        let params = init_params(7, 20, 8, 8).unwrap();
        let index = build_index(&DocumentEncoder::freeze(&params), &tok, &docs).unwrap();
        let state_text = format!("q: {question} [SEP] q: acme");
        let v = embed_text(&params, &tok, &state_text).unwrap();
        let pool = top_k_exact(&index, &v, 4).unwrap();
        let cfg = TrainConfig {
            group_size: 2,
            top_k: 2,
            pool_size: 4,
            temperature: 0.5,
            ..TrainConfig::default()
        };
        let task = ChainTask {
            question: question.into(),
            answer: "bob".into(),
            start: "acme".into(),
            relations: vec!["founder".into()],
            hops: 1,
        };
        Self {
            tok,
            docs,
            params,
            index,
            task,
            cfg,
            state_text,
            pool,
        }
    }

    fn log_prob(&self, action: &RankedAction) -> f64 {
        let mut g = Graph::new();
        let nodes = self.params.attach(&mut g, false).unwrap();
        let s = retrl::encoder::encode_state(&mut g, nodes, &self.tok, &self.state_text).unwrap();
        let lp = pl_log_prob(
            &mut g,
            s,
            &self.index,
            &self.pool,
            action,
            self.cfg.temperature,
        )
        .unwrap();
        g.value(lp).item()
    }

    /// A group whose members hold the given ratios `π_θ / π_old` at the
    /// current parameters.
    fn group(&self, ratios: [f64; 2], rewards: [f64; 2]) -> RolloutGroup {
        let ids = self.pool.ids();
        let actions = [vec![ids[0], ids[1]], vec![ids[2], ids[3]]];
        let trajectories = actions
            .iter()
            .zip(ratios)
            .zip(rewards)
            .map(|((a, rho), reward)| {
                let action = RankedAction {
                    doc_ids: a.clone(),
                    log_probs: None,
                };
                let old_log_prob = self.log_prob(&action) - rho.ln();
                Trajectory {
                    steps: vec![TrajectoryStep {
                        state_text: self.state_text.clone(),
                        pool: self.pool.clone(),
                        action,
                        old_log_prob,
                    }],
                    answer: String::new(),
                    reward,
                }
            })
            .collect();
        let (adv, degenerate) = advantages(&rewards).unwrap();
        RolloutGroup {
            task_index: 0,
            trajectories,
            advantages: adv,
            degenerate,
        }
    }

    fn loss_node(&self, g: &mut Graph, x: &[NodeId], groups: &[RolloutGroup]) -> NodeId {
        let nodes = ParamNodes {
            token_embeddings: x[0],
            projection: x[1],
        };
        grpo_loss(g, nodes, &self.tok, &self.index, groups, &self.cfg)
            .unwrap()
            .loss
    }

    fn inputs(&self) -> Vec<Array> {
        vec![
            self.params.token_embeddings.clone(),
            self.params.projection.clone(),
        ]
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_prim: f64 = 0.0;
    let mut worst_name = "";
    for (name, build, inputs) in primitive_cases(&mut rng) {
        let err = common::gradient_error(build, &inputs, FD_STEP);
        ensure(err <= PRIMITIVE_FD_TOL, || {
            format!("{name}: rel err {err:.2e}")
        })?;
        if err >= worst_prim {
            worst_prim = err;
            worst_name = name;
        }
    }
    let tiny = Tiny::new();
    let mut worst_comp: f64 = 0.0;
    // both members unclipped, then one member beyond the clip range
    for ratios in [[0.9, 1.1], [1.5, 1.1], [0.95, 0.7]] {
        let groups = vec![tiny.group(ratios, [1.0, 0.0])];
        let err = common::gradient_error(
            |g, x| tiny.loss_node(g, x, &groups),
            &tiny.inputs(),
            FD_STEP,
        );
        ensure(err <= COMPOSED_FD_TOL, || {
            format!("grpo_loss at ratios {ratios:?}: rel err {err:.2e}")
        })?;
        worst_comp = worst_comp.max(err);
    }
    Ok(format!(
        "14 primitives, worst {worst_name} {worst_prim:.2e}; grpo_loss worst {worst_comp:.2e}"
    ))
}

fn generated(seed: u64, top_k: usize) -> (EnvConfig, retrl::env::GeneratedEnv) {
    let cfg = EnvConfig {
        top_k,
        ..EnvConfig::default()
    };
    let g = chainqa_generate(&cfg, seed).unwrap();
    (cfg, g)
}

fn criterion_4() -> Outcome {
    ensure(surrogate_term(1.5, 1.0, 0.2) == 1.2, || {
        "probe (1.5, 1, 0.2)".into()
    })?;
    ensure(surrogate_term(0.5, -1.0, 0.2) == -0.8, || {
        "probe (0.5, -1, 0.2)".into()
    })?;

    let (env_cfg, g) = generated(11, 3);
    let cfg = TrainConfig::default();
    let params = init_params(11, g.vocabulary.vocab_size(), 64, 64).unwrap();
    let index = build_index(
        &DocumentEncoder::freeze(&params),
        &g.vocabulary,
        &g.documents,
    )
    .unwrap();
    let backend = ScriptedChainQa::new(
        &g.documents,
        &env_cfg.relations,
        env_cfg.aliasing,
        env_cfg.top_k,
        env_cfg.max_steps,
    )
    .unwrap();
    let ctx = RolloutContext {
        tokenizer: &g.vocabulary,
        index: &index,
        documents: &g.documents,
        backend: &backend,
    };
    let mut live = 0;
    let mut worst: f64 = 0.0;
    for t in 0..64 {
        let group = rollout_group(&params, ctx, &g.train, t, &cfg, 500 + t as u64)
            .map_err(|e| e.to_string())?;
        if group.degenerate {
            continue;
        }
        live += 1;
        let mut graph = Graph::new();
        let nodes = params.attach(&mut graph, true).unwrap();
        let out = grpo_loss(&mut graph, nodes, &g.vocabulary, &index, &[group], &cfg)
            .map_err(|e| e.to_string())?;
        ensure(out.clip_fraction == 0.0, || {
            format!("task {t}: clip fraction {}", out.clip_fraction)
        })?;
        worst = worst.max(out.value.abs());
    }
    ensure(live > 0, || "no non-degenerate group among 64 tasks".into())?;
    ensure(worst <= SURROGATE_TOL, || {
        format!("max |surrogate| {worst:.2e}")
    })?;
    Ok(format!(
        "probes exact; {live} live groups at theta = theta_old, max |J| {worst:.2e}, clip fraction 0"
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    let mut groups = 0;
    while groups < 1000 {
        let rewards: Vec<f64> = if groups % 2 == 0 {
            (0..8).map(|_| rng.random_range(0.0..1.0)).collect()
        } else {
            (0..8)
                .map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)])
                .collect()
        };
        let (a, degenerate) = advantages(&rewards).map_err(|e| e.to_string())?;
        if degenerate {
            continue;
        }
        let mean = a.iter().sum::<f64>() / 8.0;
        let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
        groups += 1;
    }
    ensure(
        worst_mean <= ADV_MEAN_TOL && worst_std <= ADV_STD_TOL,
        || format!("max |mean| {worst_mean:.2e}, max |std-1| {worst_std:.2e}"),
    )?;

    for constant in [0.0, 0.37, 1.0] {
        let (a, degenerate) = advantages(&[constant; 8]).map_err(|e| e.to_string())?;
        ensure(degenerate && a.iter().all(|&x| x == 0.0), || {
            format!("constant reward {constant} not flagged")
        })?;
    }

    // a degenerate group leaves the gradient of a batch unchanged
    let tiny = Tiny::new();
    let live = tiny.group([0.9, 1.1], [1.0, 0.0]);
    let dead = tiny.group([1.2, 0.8], [0.5, 0.5]);
    ensure(dead.degenerate, || "constant group not degenerate".into())?;
    let grads = |groups: &[RolloutGroup]| {
        let mut g = Graph::new();
        let nodes = tiny.params.attach(&mut g, true).unwrap();
        let out = grpo_loss(&mut g, nodes, &tiny.tok, &tiny.index, groups, &tiny.cfg)?;
        let grads = g.backward(out.loss).unwrap();
        Ok::<_, GrpoError>(
            [nodes.token_embeddings, nodes.projection]
                .map(|n| grads.get(n).unwrap().data().to_vec()),
        )
    };
    let alone = grads(std::slice::from_ref(&live)).map_err(|e| e.to_string())?;
    let mixed = grads(&[live.clone(), dead.clone()]).map_err(|e| e.to_string())?;
    ensure(alone == mixed, || {
        "degenerate group changed the gradient".into()
    })?;
    ensure(
        matches!(
            grads(std::slice::from_ref(&dead)),
            Err(GrpoError::AllDegenerate)
        ),
        || "all-degenerate batch produced a loss".into(),
    )?;

    // a batch where no member can succeed takes no update
    let impossible = ChainTask {
        answer: "nobody".into(),
        ..tiny.task.clone()
    };
    let backend = ScriptedChainQa::new(
        &tiny.docs,
        &["founder".into(), "location".into()],
        AliasingMode::Aliased,
        2,
        2,
    )
    .map_err(|e| e.to_string())?;
    let ctx = RolloutContext {
        tokenizer: &tiny.tok,
        index: &tiny.index,
        documents: &tiny.docs,
        backend: &backend,
    };
    let mut trainer = Trainer::new(
        TrainConfig {
            batch_size: 2,
            ..tiny.cfg.clone()
        },
        tiny.params.clone(),
        5,
    )
    .map_err(|e| e.to_string())?;
    let m = trainer
        .train_step(ctx, &[impossible])
        .map_err(|e| e.to_string())?;
    ensure(m.skipped && trainer.params == tiny.params, || {
        "all-degenerate step updated parameters".into()
    })?;

    Ok(format!(
        "1000 groups: max |mean A| {worst_mean:.2e}, max |std-1| {worst_std:.2e}; \
         degenerate groups add zero gradient"
    ))
}

fn run_config(dir: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "seed = 5\n\
         [train]\n\
         learning_rate = 1e-3\n\
         {extra}\n"
    );
    RunConfig::from_toml(&text, dir).unwrap()
}

fn prepare(cfg: &RunConfig) -> Result<(), String> {
    cmd_gen_env(cfg).map_err(|e| e.to_string())?;
    cmd_index(cfg, None).map_err(|e| e.to_string())?;
    cmd_filter(cfg, 8).map_err(|e| e.to_string())?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = run_config(dir.path(), "steps = 100");
    prepare(&cfg)?;
    let before = read(&cfg.index_path())?;
    let report = cmd_train(&cfg, None).map_err(|e| e.to_string())?;
    ensure(report.final_step == 100, || {
        format!("ran to step {}", report.final_step)
    })?;
    let after = read(&cfg.index_path())?;
    ensure(before == after, || {
        "index file changed during training".into()
    })?;
    let state = TrainState::from_checkpoint(
        &Checkpoint::load(&report.checkpoint).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    ensure(state.params != *state.doc_encoder.snapshot(), || {
        "policy parameters never moved".into()
    })?;
    Ok(format!(
        "100 steps; index file ({} bytes) byte-identical; policy moved, doc encoder fixed",
        after.len()
    ))
}

fn criterion_7() -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in E2E_SEEDS {
        let (env_cfg, g) = generated(seed, 1);
        assert_eq!(
            (
                env_cfg.entities,
                env_cfg.relations.len(),
                env_cfg.min_hops,
                env_cfg.max_hops
            ),
            (200, 2, 1, 2)
        );
        assert_eq!(env_cfg.distractor_rate, 0.1);
        assert_eq!(env_cfg.aliasing, AliasingMode::Aliased);
        let one_hop = |ts: &[ChainTask]| -> Vec<ChainTask> {
            ts.iter().filter(|t| t.hops == 1).cloned().collect()
        };
        let train1 = one_hop(&g.train);
        let eval1 = one_hop(&g.eval);
        let eval2: Vec<ChainTask> = g.eval.iter().filter(|t| t.hops == 2).cloned().collect();

        let params = init_params(seed, g.vocabulary.vocab_size(), 64, 64).unwrap();
        let frozen = DocumentEncoder::freeze(&params);
        let index = build_index(&frozen, &g.vocabulary, &g.documents).unwrap();
        let backend = ScriptedChainQa::new(
            &g.documents,
            &env_cfg.relations,
            env_cfg.aliasing,
            1,
            env_cfg.max_steps,
        )
        .unwrap();
        let ctx = RolloutContext {
            tokenizer: &g.vocabulary,
            index: &index,
            documents: &g.documents,
            backend: &backend,
        };
        let cfg_for = |mode| TrainConfig {
            top_k: 1,
            learning_rate: E2E_LR,
            steps: E2E_STEPS,
            render_mode: mode,
            ..TrainConfig::default()
        };
        let history = cfg_for(RenderMode::HistoryAware);
        let query_only = cfg_for(RenderMode::QueryOnly);

        // (a) sampled untrained reward against the enumerated expectation
        for cfg in [&history, &query_only] {
            let mut total = 0.0;
            let mut expected = 0.0;
            let mut variance = 0.0;
            for (i, task) in eval1.iter().enumerate() {
                let outcomes = common::one_hop_reward_outcomes(
                    &params,
                    frozen.snapshot(),
                    &g.vocabulary,
                    &g.documents,
                    task,
                    cfg.render_mode == RenderMode::HistoryAware,
                    cfg.pool_size,
                    cfg.temperature,
                );
                let (m, v) = common::moments(&outcomes);
                expected += m * BASELINE_ROLLOUTS as f64;
                variance += v * BASELINE_ROLLOUTS as f64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + i as u64);
                for _ in 0..BASELINE_ROLLOUTS {
                    total += rollout_episode(&params, ctx, task, cfg, &mut rng)
                        .map_err(|e| e.to_string())?
                        .reward;
                }
            }
            let n = (eval1.len() * BASELINE_ROLLOUTS) as f64;
            let (emp, base, sigma) = (total / n, expected / n, variance.sqrt() / n);
            let ok = (emp - base).abs() <= SIGMAS * sigma;
            lines.push(format!(
                "seed {seed} {:?}: untrained sampled reward {emp:.4} vs enumerated {base:.4} \
                 (sigma {sigma:.4})",
                cfg.render_mode
            ));
            if !ok {
                failures.push(format!("(a) seed {seed} {:?}", cfg.render_mode));
            }
        }

        // (d) baseline: the frozen initial encoder with history-aware states
        let frozen_eval = evaluate(&params, ctx, &eval1, &history).map_err(|e| e.to_string())?;

        let train = |cfg: &TrainConfig, tasks: &[ChainTask]| -> Result<PolicyParameters, String> {
            let mut trainer =
                Trainer::new(cfg.clone(), params.clone(), seed).map_err(|e| e.to_string())?;
            for _ in 0..cfg.steps {
                trainer.train_step(ctx, tasks).map_err(|e| e.to_string())?;
            }
            Ok(trainer.params)
        };
        let hist_params = train(&history, &train1)?;
        let qo_params = train(&query_only, &train1)?;
        let hist = evaluate(&hist_params, ctx, &eval1, &history).map_err(|e| e.to_string())?;
        let qo = evaluate(&qo_params, ctx, &eval1, &query_only).map_err(|e| e.to_string())?;

        if hist.f1 < TARGET_F1 {
            failures.push(format!("(b) seed {seed}: history-aware F1 {:.3}", hist.f1));
        }
        if hist.f1 - qo.f1 < HISTORY_MARGIN {
            failures.push(format!(
                "(c) seed {seed}: gap {:.3} below {HISTORY_MARGIN}",
                hist.f1 - qo.f1
            ));
        }
        if !(frozen_eval.f1 < hist.f1 && frozen_eval.f1 < qo.f1) {
            failures.push(format!("(d) seed {seed}: frozen F1 {:.3}", frozen_eval.f1));
        }

        // informational: two-hop suite and the filtered-task protocol
        let hist2 = evaluate(&hist_params, ctx, &eval2, &history).map_err(|e| e.to_string())?;
        let qo2 = evaluate(&qo_params, ctx, &eval2, &query_only).map_err(|e| e.to_string())?;
        let (kept, dropped) =
            filter_tasks(&params, ctx, &train1, &history, 8, seed).map_err(|e| e.to_string())?;
        let filtered = train(&history, &kept)?;
        let filtered_f1 = evaluate(&filtered, ctx, &eval1, &history)
            .map_err(|e| e.to_string())?
            .f1;
        lines.push(format!(
            "seed {seed}: 1-hop eval F1 history {:.3} / query-only {:.3} / frozen {:.3} \
             ({} train, {} eval tasks)",
            hist.f1,
            qo.f1,
            frozen_eval.f1,
            train1.len(),
            eval1.len()
        ));
        lines.push(format!(
            "seed {seed}: info 2-hop F1 history {:.3} / query-only {:.3}; \
             history trained on filtered tasks ({} kept, {dropped} dropped) {filtered_f1:.3}",
            hist2.f1,
            qo2.f1,
            kept.len()
        ));
    }
    let detail = lines.join("\n      ");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}\n      {detail}", failures.join("; ")))
    }
}

fn criterion_8() -> Outcome {
    let extra = "steps = 8";
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_a = run_config(a.path(), extra);
    prepare(&cfg_a)?;
    cmd_train(&cfg_a, None).map_err(|e| e.to_string())?;

    // same run on a single worker thread
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_b = run_config(b.path(), extra);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| -> Result<(), String> {
        prepare(&cfg_b)?;
        cmd_train(&cfg_b, None).map_err(|e| e.to_string())?;
        Ok(())
    })?;
    ensure(
        read(&cfg_a.metrics_path())? == read(&cfg_b.metrics_path())?,
        || "metrics differ between identical runs".into(),
    )?;
    ensure(
        read(&cfg_a.checkpoint_path())? == read(&cfg_b.checkpoint_path())?,
        || "checkpoints differ between identical runs".into(),
    )?;

    let c = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg_c = run_config(c.path(), "steps = 4");
    prepare(&cfg_c)?;
    cmd_train(&cfg_c, None).map_err(|e| e.to_string())?;
    cfg_c.train.steps = 8;
    let r = cmd_train(&cfg_c, Some(&cfg_c.checkpoint_path())).map_err(|e| e.to_string())?;
    ensure(r.steps_run == 4, || {
        format!("resume ran {} steps", r.steps_run)
    })?;
    let metrics = read(&cfg_a.metrics_path())?;
    ensure(metrics == read(&cfg_c.metrics_path())?, || {
        "resumed metrics differ from the uninterrupted run".into()
    })?;
    ensure(
        read(&cfg_a.checkpoint_path())? == read(&cfg_c.checkpoint_path())?,
        || "resumed checkpoint differs from the uninterrupted run".into(),
    )?;
    let lines = metrics.iter().filter(|&&b| b == b'\n').count();
    Ok(format!(
        "{lines} metrics lines bit-identical across runs and thread counts; 4+4 resume matches 8"
    ))
}

fn criterion_9() -> Outcome {
    let checks: [(&str, bool); 10] = [
        ("F1 half overlap", token_f1("blue car", "red car") == 0.5),
        ("F1 identical", token_f1("paris", "paris") == 1.0),
        (
            "F1 article removal",
            token_f1("the blue car", "blue car") == 1.0,
        ),
        (
            "normalization",
            normalize_answer("The Blue Car!").0 == ["blue", "car"],
        ),
        ("F1 no overlap", token_f1("rome", "paris") == 0.0),
        ("EM identical", exact_match("blue car", "blue car") == 1.0),
        (
            "EM order sensitive",
            exact_match("blue car", "car blue") == 0.0,
        ),
        (
            "EM article removal",
            exact_match("The Paris", "paris") == 1.0,
        ),
        (
            "non-terminal reward",
            terminal_reward("paris", "paris", 1, 2, F1Variant::Set) == 0.0,
        ),
        (
            "terminal reward",
            terminal_reward("blue car", "red car", 2, 2, F1Variant::Set) == 0.5,
        ),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    ensure(failed.is_empty(), || failed.join(", "))?;
    Ok(format!("{} exact cases", checks.len()))
}

fn criterion_10() -> Outcome {
    let (len, t0, window) = (200, 37, 8);
    let series: Vec<f64> = (0..len).map(|t| if t < t0 { 0.0 } else { 1.0 }).collect();
    let y = ema_smooth(&series, window).map_err(|e| e.to_string())?;
    let worst = y
        .iter()
        .enumerate()
        .map(|(t, v)| (v - common::ema_step_response(t, t0, window)).abs())
        .fold(0.0, f64::max);
    ensure(worst <= EMA_TOL, || format!("max deviation {worst:.2e}"))?;

    let beta = 1.0 - 2.0 / (window as f64 + 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let noisy: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
    let z = ema_smooth(&noisy, window).map_err(|e| e.to_string())?;
    let recurrence = (1..len)
        .map(|t| (z[t] - (beta * z[t - 1] + (1.0 - beta) * noisy[t])).abs())
        .fold((z[0] - noisy[0]).abs(), f64::max);
    ensure(recurrence <= EMA_TOL, || {
        format!("recurrence deviation {recurrence:.2e}")
    })?;
    Ok(format!(
        "step response max deviation {worst:.2e}; recurrence max deviation {recurrence:.2e}"
    ))
}

type Criterion = (u32, &'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 10] = [
        (
            1,
            "Plackett-Luce exactness",
            criterion_1,
            Some(Duration::from_secs(10)),
        ),
        (
            2,
            "sampling fidelity",
            criterion_2,
            Some(Duration::from_secs(60)),
        ),
        (
            3,
            "gradient correctness",
            criterion_3,
            Some(Duration::from_secs(60)),
        ),
        (4, "GRPO identities", criterion_4, None),
        (5, "advantage normalization", criterion_5, None),
        (6, "document index frozen", criterion_6, None),
        (
            7,
            "aliasing end-to-end",
            criterion_7,
            Some(Duration::from_secs(1800)),
        ),
        (8, "determinism and resume", criterion_8, None),
        (9, "reward unit cases", criterion_9, None),
        (10, "EMA smoothing", criterion_10, None),
    ];
    let mut failed = 0;
    for (id, name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            })
            .and_then(|detail| {
                let elapsed = start.elapsed();
                match budget {
                    Some(b) if elapsed > b => {
                        Err(format!("{detail}; runtime {elapsed:?} over {b:?}"))
                    }
                    _ => Ok(detail),
                }
            });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
