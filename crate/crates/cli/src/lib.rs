//! Command-line stages of the RLHF pipeline. Every stage reads and writes
//! files inside one run directory (`--out`), named by the `paths` section of
//! the run config.

pub mod server;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deskrlhf_core::annotation::AnnotationStore;
use deskrlhf_core::config::RunConfig;
use deskrlhf_core::io::{
    file_sha256, load_checkpoint, read_jsonl, read_metrics_csv, save_checkpoint, write_atomic, write_jsonl,
    write_metrics_csv, write_reward_curve_csv, PromptRecord, ResponseRecord, RunLock,
};
use deskrlhf_core::model::{CriticModel, PolicyModel, RewardModel};
use deskrlhf_core::pipeline::{
    eval_prompt_id, generate_responses, make_prompts, oracle_rankings, pair_examples, pairs_from_rankings, prompt_id,
    prompt_records, resolve_prompts, stage_seed, trained_reward_model, warm_started_actor, Stage,
};
use deskrlhf_core::ppo::{evaluate_quality, rlhf_train, IterationMetrics, RlhfModels};
use deskrlhf_core::preference::{PairSource, PreferencePair, RankedResponseSet};
use deskrlhf_core::{Error, Result};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

/// Name of the resolved config echoed into the run directory.
pub const RESOLVED_CONFIG: &str = "config.json";
/// Environment variable holding the annotation server port.
pub const PORT_ENV: &str = "DESKRLHF_PORT";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Parser)]
#[command(name = "deskrlhf", version, about = "Desk-scale RLHF pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run config JSON. Defaults to the run directory's echoed config, then
    /// to built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config override `dotted.key=json-value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Source {
    Human,
    Oracle,
}

impl From<Source> for PairSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Human => PairSource::Human,
            Source::Oracle => PairSource::Oracle,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample training and evaluation prompts from the oracle task.
    MakePrompts,
    /// Fit a fresh actor to random demonstrations.
    WarmStart,
    /// Sample k responses per prompt.
    Generate {
        /// Policy checkpoint; defaults to the warm-start checkpoint.
        #[arg(long)]
        actor: Option<PathBuf>,
    },
    /// Rank responses with the synthetic oracle annotators.
    AnnotateOracle,
    /// Serve the annotation HTTP API; the port comes from DESKRLHF_PORT.
    ServeAnnotation,
    /// Turn rankings into preference pairs.
    MakePairs {
        #[arg(long, value_enum, default_value_t = Source::Oracle)]
        source: Source,
    },
    /// Train the reward model on preference pairs.
    TrainReward,
    /// Run PPO from the warm-start actor against the reward model.
    TrainPpo {
        /// Initial policy checkpoint; defaults to the warm-start checkpoint.
        #[arg(long)]
        actor: Option<PathBuf>,
    },
    /// Mean oracle quality of a policy on the evaluation prompts.
    Evaluate {
        /// Policy checkpoint; defaults to the PPO actor checkpoint.
        #[arg(long)]
        actor: Option<PathBuf>,
    },
    /// Print the PPO metrics CSV as JSON lines.
    ExportMetrics,
    /// Every stage in order, on the oracle path.
    Pipeline,
}

/// Resolved configuration plus run-directory paths.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn open(common: &Common) -> Result<Self> {
        let mut overrides = common.set.clone();
        if let Some(seed) = common.seed {
            overrides.push(format!("seed={seed}"));
        }
        let echoed = common.out.join(RESOLVED_CONFIG);
        let config = match &common.config {
            Some(path) => RunConfig::load(path, &overrides)?,
            None if echoed.exists() => RunConfig::load(&echoed, &overrides)?,
            None => RunConfig::default().with_overrides(&overrides)?,
        };
        Ok(Self {
            config,
            dir: common.out.clone(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn echo_config(&self) -> Result<()> {
        write_atomic(&self.path(RESOLVED_CONFIG), self.config.to_json_pretty().as_bytes())
    }

    fn prompts(&self) -> Result<Vec<PromptRecord>> {
        read_jsonl(&self.path(&self.config.paths.prompts))
    }

    fn responses(&self) -> Result<Vec<ResponseRecord>> {
        read_jsonl(&self.path(&self.config.paths.responses))
    }

    fn policy(&self, path: &Path) -> Result<PolicyModel> {
        PolicyModel::new(load_checkpoint(path)?)
    }

    fn checkpoint_or(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path(default))
    }
}

/// Runs one subcommand and returns its JSON summary (null when the command
/// already wrote its output to stdout).
pub fn execute(cli: Cli) -> Result<Value> {
    let run = Run::open(&cli.common)?;
    if matches!(cli.command, Command::ExportMetrics) {
        return export_metrics(&run);
    }
    let _lock = RunLock::acquire(&run.dir)?;
    run.echo_config()?;
    match cli.command {
        Command::MakePrompts => cmd_make_prompts(&run),
        Command::WarmStart => cmd_warm_start(&run),
        Command::Generate { actor } => cmd_generate(&run, &actor),
        Command::AnnotateOracle => cmd_annotate_oracle(&run),
        Command::ServeAnnotation => cmd_serve(&run),
        Command::MakePairs { source } => cmd_make_pairs(&run, source.into()),
        Command::TrainReward => cmd_train_reward(&run),
        Command::TrainPpo { actor } => cmd_train_ppo(&run, &actor),
        Command::Evaluate { actor } => cmd_evaluate(&run, &actor),
        Command::Pipeline => cmd_pipeline(&run),
        Command::ExportMetrics => unreachable!("handled before locking"),
    }
}

/// Entry point for the binary: runs and prints the summary line.
pub fn run(cli: Cli) -> Result<()> {
    let summary = execute(cli)?;
    if !summary.is_null() {
        println!("{summary}");
    }
    Ok(())
}

fn cmd_make_prompts(run: &Run) -> Result<Value> {
    let (train, eval) = make_prompts(&run.config)?;
    let p = &run.config.paths;
    write_jsonl(&run.path(&p.prompts), &prompt_records(&train, prompt_id))?;
    write_jsonl(&run.path(&p.eval_prompts), &prompt_records(&eval, eval_prompt_id))?;
    Ok(json!({ "stage": "make-prompts", "prompts": train.len(), "eval_prompts": eval.len() }))
}

fn cmd_warm_start(run: &Run) -> Result<Value> {
    let prompts = resolve_prompts(&run.prompts()?, run.config.actor.vocab_size)?;
    let (actor, nll) = warm_started_actor(&run.config, &prompts)?;
    let path = run.path(&run.config.paths.sft_checkpoint);
    save_checkpoint(&path, actor.net())?;
    Ok(json!({ "stage": "warm-start", "demonstration_nll": nll, "checkpoint_sha256": file_sha256(&path)? }))
}

fn cmd_generate(run: &Run, actor: &Option<PathBuf>) -> Result<Value> {
    let policy = run.policy(&run.checkpoint_or(actor, &run.config.paths.sft_checkpoint))?;
    let prompts = run.prompts()?;
    let responses = generate_responses(&policy, &prompts, &run.config, stage_seed(run.config.seed, Stage::Generate))?;
    write_jsonl(&run.path(&run.config.paths.responses), &responses)?;
    Ok(json!({ "stage": "generate", "prompts": prompts.len(), "responses": responses.len() }))
}

fn cmd_annotate_oracle(run: &Run) -> Result<Value> {
    let a = &run.config.annotation;
    let (rankings, records) = oracle_rankings(
        &run.config.task,
        &run.prompts()?,
        &run.responses()?,
        a.annotators,
        a.noise,
        stage_seed(run.config.seed, Stage::Annotate),
    )?;
    write_jsonl(&run.path(&run.config.paths.annotations), &records)?;
    write_jsonl(&run.path(&run.config.paths.rankings), &rankings)?;
    Ok(json!({ "stage": "annotate-oracle", "annotations": records.len(), "rankings": rankings.len() }))
}

fn cmd_serve(run: &Run) -> Result<Value> {
    let store = AnnotationStore::new(run.prompts()?, run.responses()?, run.config.annotation.lease_minutes * 60_000)?
        .with_journal(&run.path(&run.config.paths.journal))?;
    let port = match std::env::var(PORT_ENV) {
        Ok(v) => v
            .parse::<u16>()
            .map_err(|_| Error::Config(format!("{PORT_ENV}={v} is not a port number")))?,
        Err(_) => DEFAULT_PORT,
    };
    let exports = server::Exports {
        annotations: run.path(&run.config.paths.annotations),
        rankings: run.path(&run.config.paths.rankings),
    };
    let state = server::AppState::new(store, Some(exports), server::system_clock());
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        eprintln!("{}", json!({ "listening": listener.local_addr()?.to_string() }));
        axum::serve(listener, server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(json!({ "stage": "serve-annotation", "stopped": true }))
}

fn cmd_make_pairs(run: &Run, source: PairSource) -> Result<Value> {
    let rankings: Vec<RankedResponseSet> = read_jsonl(&run.path(&run.config.paths.rankings))?;
    let pairs = pairs_from_rankings(&rankings, source)?;
    write_jsonl(&run.path(&run.config.paths.pairs), &pairs)?;
    Ok(json!({ "stage": "make-pairs", "rankings": rankings.len(), "pairs": pairs.len() }))
}

fn cmd_train_reward(run: &Run) -> Result<Value> {
    let pairs: Vec<PreferencePair> = read_jsonl(&run.path(&run.config.paths.pairs))?;
    let examples = pair_examples(&run.prompts()?, &run.responses()?, &pairs, run.config.actor.vocab_size)?;
    let (reward, curve) = trained_reward_model(&run.config, &examples)?;
    let p = &run.config.paths;
    save_checkpoint(&run.path(&p.reward_checkpoint), reward.net())?;
    write_reward_curve_csv(&run.path(&p.reward_curve), &curve)?;
    let last = curve.last();
    Ok(json!({
        "stage": "train-reward",
        "pairs": pairs.len(),
        "train_loss": last.map(|s| s.train_loss),
        "held_out_accuracy": last.and_then(|s| s.held_out_accuracy),
    }))
}

fn cmd_train_ppo(run: &Run, actor: &Option<PathBuf>) -> Result<Value> {
    let p = &run.config.paths;
    let actor = run.policy(&run.checkpoint_or(actor, &p.sft_checkpoint))?;
    let reward = RewardModel::new(load_checkpoint(&run.path(&p.reward_checkpoint))?)?;
    let prompts = resolve_prompts(&run.prompts()?, run.config.actor.vocab_size)?;
    let mut models = RlhfModels {
        reference: actor.snapshot_reference(),
        critic: CriticModel::from_policy(&actor),
        actor,
        reward,
    };
    let (actor_path, critic_path, metrics_path) = (
        run.path(&p.actor_checkpoint),
        run.path(&p.critic_checkpoint),
        run.path(&p.metrics),
    );
    let save = |models: &RlhfModels, history: &[IterationMetrics]| -> Result<()> {
        save_checkpoint(&actor_path, models.actor.net())?;
        save_checkpoint(&critic_path, models.critic.net())?;
        write_metrics_csv(&metrics_path, history)
    };
    save(&models, &[])?;
    let mut history = Vec::with_capacity(run.config.ppo.iterations);
    rlhf_train(
        &mut models,
        &prompts,
        &run.config.ppo,
        stage_seed(run.config.seed, Stage::Ppo),
        Some(&run.config.task),
        |m, models| {
            history.push(*m);
            save(models, &history)?;
            Ok(true)
        },
    )?;
    let last = history.last();
    Ok(json!({
        "stage": "train-ppo",
        "iterations": history.len(),
        "mean_reward": last.map(|m| m.mean_reward),
        "mean_kl": last.map(|m| m.mean_kl),
        "actor_sha256": file_sha256(&actor_path)?,
    }))
}

fn cmd_evaluate(run: &Run, actor: &Option<PathBuf>) -> Result<Value> {
    let p = &run.config.paths;
    let eval_prompts: Vec<PromptRecord> = read_jsonl(&run.path(&p.eval_prompts))?;
    let prompts = resolve_prompts(&eval_prompts, run.config.actor.vocab_size)?;
    let quality = |path: &Path| -> Result<Value> {
        let policy = run.policy(path)?;
        let q = evaluate_quality(
            &policy,
            &prompts,
            &run.config.task,
            run.config.ppo.max_response_tokens,
            run.config.evaluation.samples_per_prompt,
            stage_seed(run.config.seed, Stage::Evaluate),
        )?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
        Ok(json!({ "checkpoint": name, "sha256": file_sha256(path)?, "quality": q }))
    };
    let policy = quality(&run.checkpoint_or(actor, &p.actor_checkpoint))?;
    let baseline_path = run.path(&p.sft_checkpoint);
    let baseline = if baseline_path.exists() {
        Some(quality(&baseline_path)?)
    } else {
        None
    };
    let improvement = baseline
        .as_ref()
        .map(|b| policy["quality"].as_f64().unwrap_or(f64::NAN) - b["quality"].as_f64().unwrap_or(f64::NAN));
    let report = json!({
        "task": run.config.task.id(),
        "eval_prompts": prompts.len(),
        "samples_per_prompt": run.config.evaluation.samples_per_prompt,
        "policy": policy,
        "baseline": baseline,
        "improvement": improvement,
    });
    write_atomic(
        &run.path(&p.evaluation),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(json!({ "stage": "evaluate", "quality": report["policy"]["quality"], "improvement": improvement }))
}

fn export_metrics(run: &Run) -> Result<Value> {
    let rows = read_metrics_csv(&run.path(&run.config.paths.metrics))?;
    for row in &rows {
        println!("{}", serde_json::to_string(&json!({
            "iteration": row.iteration,
            "mean_reward": row.mean_reward,
            "mean_kl": row.mean_kl,
            "clip_fraction": row.clip_fraction,
            "actor_loss": row.actor_loss,
            "critic_loss": row.critic_loss,
        }))?);
    }
    Ok(Value::Null)
}

fn cmd_pipeline(run: &Run) -> Result<Value> {
    let stages = [
        cmd_make_prompts(run)?,
        cmd_warm_start(run)?,
        cmd_generate(run, &None)?,
        cmd_annotate_oracle(run)?,
        cmd_make_pairs(run, PairSource::Oracle)?,
        cmd_train_reward(run)?,
        cmd_train_ppo(run, &None)?,
        cmd_evaluate(run, &None)?,
    ];
    Ok(json!({ "stage": "pipeline", "stages": stages }))
}
