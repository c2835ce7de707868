use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use retrl::encoder::RenderMode;
use retrl::harness::{self, BackendKind, HarnessError, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "retrl",
    version,
    about = "Train and evaluate history-aware dense retrievers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    History,
    QueryOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Scripted,
    Http,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Documents retrieved per hop.
    #[arg(long)]
    k: Option<usize>,
    /// Output directory (data dir for gen-env, run dir otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, task splits and vocabulary.
    GenEnv(Common),
    /// Encode the corpus with the frozen document encoder.
    Index {
        #[command(flatten)]
        common: Common,
        /// Take the frozen encoder from this checkpoint instead of the seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Keep training tasks with non-zero reward variance under the initial policy.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        rollouts: usize,
    },
    /// Run GRPO training.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate on the eval split with deterministic top-k retrieval.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print a sampled episode hop by hop.
    RolloutDebug {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(common: &Common, out_is_data: bool) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::load(&common.config)?;
    let overrides = Overrides {
        seed: common.seed,
        steps: common.steps,
        mode: common.mode.map(|m| match m {
            Mode::History => RenderMode::HistoryAware,
            Mode::QueryOnly => RenderMode::QueryOnly,
        }),
        backend: common.backend.map(|b| match b {
            Backend::Scripted => BackendKind::Scripted,
            Backend::Http => BackendKind::Http,
        }),
        k: common.k,
        out: common.out.clone(),
    };
    cfg.apply(&overrides, out_is_data)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenEnv(common) => {
            let cfg = load(&common, true)?;
            let r = harness::cmd_gen_env(&cfg)?;
            let m = &r.manifest;
            println!(
                "wrote {}: {} documents, {} train / {} eval tasks, vocab {}, config {}",
                r.dir.display(),
                m.documents,
                m.train_tasks,
                m.eval_tasks,
                m.vocab_size,
                m.config_hash
            );
        }
        Command::Index { common, checkpoint } => {
            let cfg = load(&common, false)?;
            let r = harness::cmd_index(&cfg, checkpoint.as_deref())?;
            println!(
                "index {} ({}x{}) sha256 {}",
                r.path.display(),
                r.rows,
                r.dim,
                r.hash
            );
        }
        Command::Filter { common, rollouts } => {
            let cfg = load(&common, false)?;
            let r = harness::cmd_filter(&cfg, rollouts)?;
            println!(
                "kept {} dropped {} -> {}",
                r.kept,
                r.dropped,
                r.path.display()
            );
        }
        Command::Train { common, resume } => {
            let cfg = load(&common, false)?;
            let r = harness::cmd_train(&cfg, resume.as_deref())?;
            if let Some(m) = &r.last {
                println!(
                    "step {} mean reward {:.4} loss {:.6} grad norm {:.4}",
                    r.final_step, m.mean_reward, m.loss, m.grad_norm
                );
            }
            println!(
                "ran {} steps; checkpoint {} metrics {}",
                r.steps_run,
                r.checkpoint.display(),
                r.metrics.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common, false)?;
            let r = harness::cmd_eval(&cfg, checkpoint.as_deref())?;
            println!(
                "{}",
                serde_json_line(&[
                    ("tasks", r.tasks as f64),
                    ("exact_match", r.exact_match),
                    ("f1", r.f1),
                    ("mean_reward", r.mean_reward),
                ])
            );
        }
        Command::RolloutDebug {
            common,
            task,
            checkpoint,
        } => {
            let cfg = load(&common, false)?;
            let seed = cfg.seed;
            let trace = harness::cmd_rollout_debug(&cfg, task, seed, checkpoint.as_deref())?;
            println!("{trace}");
        }
    }
    Ok(())
}

fn serde_json_line(fields: &[(&str, f64)]) -> String {
    let body: Vec<String> = fields
        .iter()
        .map(|(k, v)| format!("\"{k}\": {v}"))
        .collect();
    format!("{{{}}}", body.join(", "))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
