//! Run configuration, artifact files, commands and metric post-processing.

mod checkpoint;
mod commands;

pub use checkpoint::{
    index_checkpoint, index_from_checkpoint, sha256_hex, Checkpoint, Tensor, TrainState,
    INDEX_ARRAY, MAGIC, VERSION,
};
pub use commands::{
    build_backend, cmd_eval, cmd_filter, cmd_gen_env, cmd_index, cmd_rollout_debug, cmd_train,
    evaluate, filter_tasks, index_norm_error, initial_state, run_episode_greedy, EvalReport,
    FilterReport, GenEnvReport, HopTrace, IndexReport, Manifest, RolloutTrace, TrainReport,
    Workspace,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::encoder::{EncoderError, RenderMode};
use crate::env::{EnvConfig, EnvError, HttpConfig, PromptTemplates};
use crate::grpo::{GrpoError, TrainConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Usage(String),
    #[error(
        "filtering kept no tasks out of {dropped}; every task had zero reward variance \
         under the initial policy. Raise the temperature, change top_k or pool_size, \
         or regenerate the environment with more relations"
    )]
    EmptyFilter { dropped: usize },
    #[error("task id {id} out of range (have {count} tasks)")]
    UnknownTask { id: usize, count: usize },
    #[error("series must be non-empty and window at least 1")]
    EmptySeries,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] GrpoError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable category name for reporting.
    pub fn category(&self) -> &'static str {
        fn env_category(e: &EnvError) -> &'static str {
            match e {
                EnvError::Http(_) => "backend",
                EnvError::Io(_) => "io",
                EnvError::Config(_) => "config",
                _ => "data",
            }
        }
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io { .. } => "io",
            HarnessError::Checkpoint(_) => "checkpoint",
            HarnessError::Usage(_) | HarnessError::UnknownTask { .. } => "usage",
            HarnessError::EmptyFilter { .. } | HarnessError::EmptySeries => "data",
            HarnessError::Env(e) => env_category(e),
            HarnessError::Corpus(CorpusError::Io(_)) => "io",
            HarnessError::Corpus(_) | HarnessError::Encoder(_) => "data",
            HarnessError::Train(GrpoError::Config(_)) => "config",
            HarnessError::Train(GrpoError::Env(e)) => env_category(e),
            HarnessError::Train(GrpoError::Rollout { source, .. }) => match source.as_ref() {
                GrpoError::Env(e) => env_category(e),
                _ => "training",
            },
            HarnessError::Train(_) => "training",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "io" => 4,
            "data" => 5,
            "checkpoint" => 6,
            "backend" => 7,
            _ => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            output_dim: 64,
        }
    }
}

/// File locations, relative to the config file's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Generated environment: corpus, task splits, vocabulary, manifest.
    pub data_dir: PathBuf,
    /// Run outputs: index, filtered tasks, checkpoint, metrics.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub http: HttpConfig,
    pub prompts: PromptTemplates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// `false` renders states from the current sub-query alone.
    pub history_aware: bool,
    /// `false` evaluates the frozen initial encoder and refuses to train.
    pub rl: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            history_aware: true,
            rl: true,
        }
    }
}

/// Which training tasks `train` reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainTasks {
    /// The output of `filter`.
    #[default]
    Filtered,
    /// The whole train split; zero-variance groups are still skipped per step.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub train_tasks: TrainTasks,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint_every: 0,
            train_tasks: TrainTasks::Filtered,
            env: EnvConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
            backend: BackendConfig::default(),
            ablation: AblationConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Command-line overrides applied after the config file is read.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub mode: Option<RenderMode>,
    pub backend: Option<BackendKind>,
    pub k: Option<usize>,
    /// Replaces `data_dir` for `gen-env` and `run_dir` otherwise.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.reconcile();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    /// Either switch selecting query-only rendering sets both; one `k`
    /// governs sampling, the backend and evaluation.
    fn reconcile(&mut self) {
        if !self.ablation.history_aware || self.train.render_mode == RenderMode::QueryOnly {
            self.ablation.history_aware = false;
            self.train.render_mode = RenderMode::QueryOnly;
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate()?;
        self.train.validate()?;
        if self.env.top_k != self.train.top_k {
            return Err(HarnessError::Config(format!(
                "env.top_k ({}) and train.top_k ({}) must agree",
                self.env.top_k, self.train.top_k
            )));
        }
        if self.encoder.embed_dim == 0 || self.encoder.output_dim == 0 {
            return Err(HarnessError::Config(
                "encoder dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides, out_is_data: bool) -> Result<(), HarnessError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.steps {
            self.train.steps = s;
        }
        if let Some(m) = o.mode {
            self.train.render_mode = m;
            self.ablation.history_aware = m == RenderMode::HistoryAware;
        }
        if let Some(b) = o.backend {
            self.backend.kind = b;
        }
        if let Some(k) = o.k {
            self.env.top_k = k;
            self.train.top_k = k;
        }
        if let Some(out) = &o.out {
            if out_is_data {
                self.paths.data_dir = out.clone();
            } else {
                self.paths.run_dir = out.clone();
            }
        }
        self.reconcile();
        self.validate()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.paths.data_dir)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.paths.run_dir)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.data_dir().join("corpus.jsonl")
    }

    pub fn train_tasks_path(&self) -> PathBuf {
        self.data_dir().join("train.jsonl")
    }

    pub fn eval_tasks_path(&self) -> PathBuf {
        self.data_dir().join("eval.jsonl")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.data_dir().join("vocab.txt")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn index_path(&self) -> PathBuf {
        self.run_dir().join("index.bin")
    }

    pub fn filtered_tasks_path(&self) -> PathBuf {
        self.run_dir().join("train.filtered.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.run_dir().join("checkpoint.bin")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run_dir().join("metrics.jsonl")
    }

    /// SHA-256 of the canonical JSON form of the whole config.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// Exponential moving average with `β = 1 − 2/(window+1)` and `y₀ = x₀`.
pub fn ema_smooth(series: &[f64], window: usize) -> Result<Vec<f64>, HarnessError> {
    if series.is_empty() || window == 0 {
        return Err(HarnessError::EmptySeries);
    }
    let beta = 1.0 - 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(series.len());
    let mut y = series[0];
    out.push(y);
    for &x in &series[1..] {
        y = beta * y + (1.0 - beta) * x;
        out.push(y);
    }
    Ok(out)
}
