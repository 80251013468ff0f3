//! End-to-end run on an oracle task: warm-start, generate, rank, pair,
//! reward training, PPO, evaluation. Each stage draws its randomness from
//! the run seed through [`stage_seed`].

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{CriticModel, PolicyModel, RewardModel, Token};
use crate::oracle::OracleTask;
use crate::ppo::{evaluate_quality, rlhf_train, IterationMetrics, RlhfModels};
use crate::preference::{extract_pairs, AnnotationRecord, PairSource, PreferencePair, RankedResponseSet};
use crate::reward::{split_held_out, train_reward, EpochStats, PairExample};
use crate::io::{PromptRecord, ResponseRecord};
use crate::sampling::{derive_seed, sample_k_responses};
use crate::sft::{demonstration_nll, random_demonstrations, warm_start};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashMap;

/// Stage identifiers mixed into the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prompts = 1,
    EvalPrompts,
    ActorInit,
    Demonstrations,
    WarmStart,
    Generate,
    Annotate,
    RewardInit,
    RewardTrain,
    Evaluate,
    Ppo,
}

pub fn stage_seed(run_seed: u64, stage: Stage) -> u64 {
    derive_seed(run_seed, stage as u64, 0)
}

pub fn prompt_id(index: usize) -> String {
    format!("p{index:05}")
}

pub fn eval_prompt_id(index: usize) -> String {
    format!("e{index:05}")
}

/// Training and evaluation prompts.
pub fn make_prompts(config: &RunConfig) -> Result<(Vec<Vec<Token>>, Vec<Vec<Token>>)> {
    let p = &config.prompts;
    let train = config.task.sample_prompts(p.count, p.min_len, p.max_len, stage_seed(config.seed, Stage::Prompts))?;
    let eval = config.task.sample_prompts(p.eval_count, p.min_len, p.max_len, stage_seed(config.seed, Stage::EvalPrompts))?;
    Ok((train, eval))
}

pub fn prompt_records(prompts: &[Vec<Token>], id: fn(usize) -> String) -> Vec<PromptRecord> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| PromptRecord::from_tokens(id(i), p.clone()))
        .collect()
}

pub fn resolve_prompts(records: &[PromptRecord], vocab_size: usize) -> Result<Vec<Vec<Token>>> {
    records.iter().map(|r| r.resolve(vocab_size)).collect()
}

/// Fresh actor fitted to random demonstrations. Returns it with its final
/// demonstration NLL.
pub fn warm_started_actor(config: &RunConfig, prompts: &[Vec<Token>]) -> Result<(PolicyModel, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, Stage::ActorInit));
    let mut actor = PolicyModel::init(config.actor.clone(), &mut rng)?;
    let w = &config.warm_start;
    let demos = random_demonstrations(
        prompts,
        config.actor.vocab_size,
        w.demo_min_len,
        w.demo_max_len,
        stage_seed(config.seed, Stage::Demonstrations),
    )?;
    warm_start(&mut actor, &demos, w, stage_seed(config.seed, Stage::WarmStart))?;
    let nll = demonstration_nll(&actor, &demos)?;
    Ok((actor, nll))
}

/// `k` responses per prompt, numbered `0..k`; prompt `i` draws its sample
/// seeds from `derive_seed(seed, i, 0)`.
pub fn generate_responses(policy: &PolicyModel, prompts: &[PromptRecord], config: &RunConfig, seed: u64) -> Result<Vec<ResponseRecord>> {
    let vocab = policy.net().config().vocab_size;
    let mut out = Vec::with_capacity(prompts.len() * config.generation.k_responses);
    for (i, p) in prompts.iter().enumerate() {
        let tokens = p.resolve(vocab)?;
        let sampled = sample_k_responses(policy, &tokens, &config.generation.sampler(derive_seed(seed, i as u64, 0)))?;
        out.extend(sampled.into_iter().enumerate().map(|(j, r)| ResponseRecord {
            prompt_id: p.id.clone(),
            response_id: j as u32,
            tokens: r.tokens,
            seed: r.seed,
        }));
    }
    Ok(out)
}

/// Responses grouped under their prompt, in prompt order and then by id.
/// Unknown prompt ids and repeated response ids are schema errors.
pub fn group_responses<'a>(prompts: &[PromptRecord], responses: &'a [ResponseRecord]) -> Result<Vec<Vec<&'a ResponseRecord>>> {
    let index: HashMap<&str, usize> = prompts.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let mut groups: Vec<Vec<&ResponseRecord>> = vec![Vec::new(); prompts.len()];
    for r in responses {
        let &i = index
            .get(r.prompt_id.as_str())
            .ok_or_else(|| Error::Schema(format!("response for unknown prompt `{}`", r.prompt_id)))?;
        groups[i].push(r);
    }
    for g in &mut groups {
        g.sort_by_key(|r| r.response_id);
        if let Some(w) = g.windows(2).find(|w| w[0].response_id == w[1].response_id) {
            return Err(Error::Schema(format!(
                "duplicate response {} for prompt `{}`",
                w[0].response_id, w[0].prompt_id
            )));
        }
    }
    Ok(groups)
}

/// Oracle rankings for every prompt that has responses, plus the synthetic
/// rubric records.
pub fn oracle_rankings(
    task: &OracleTask,
    prompts: &[PromptRecord],
    responses: &[ResponseRecord],
    annotators: usize,
    noise: f64,
    seed: u64,
) -> Result<(Vec<RankedResponseSet>, Vec<AnnotationRecord>)> {
    let groups = group_responses(prompts, responses)?;
    let mut rankings = Vec::with_capacity(prompts.len());
    let mut records = Vec::new();
    for (i, (prompt, set)) in prompts.iter().zip(groups).enumerate() {
        if set.is_empty() {
            continue;
        }
        let tokens = prompt.resolve(task.vocab_size)?;
        let indexed: Vec<(u32, Vec<Token>)> = set.iter().map(|r| (r.response_id, r.tokens.clone())).collect();
        let (ranking, recs) = task.rank(&prompt.id, &tokens, &indexed, annotators, noise, derive_seed(seed, i as u64, 0))?;
        rankings.push(ranking);
        records.extend(recs);
    }
    Ok((rankings, records))
}

pub fn pairs_from_rankings(rankings: &[RankedResponseSet], source: PairSource) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::with_capacity(rankings.len() * 4);
    for r in rankings {
        r.validate()?;
        pairs.extend(extract_pairs(r, source)?);
    }
    Ok(pairs)
}

/// Resolves pair ids to token sequences.
pub fn pair_examples(
    prompts: &[PromptRecord],
    responses: &[ResponseRecord],
    pairs: &[PreferencePair],
    vocab_size: usize,
) -> Result<Vec<PairExample>> {
    let prompt_tokens: HashMap<&str, Vec<Token>> = prompts
        .iter()
        .map(|p| Ok((p.id.as_str(), p.resolve(vocab_size)?)))
        .collect::<Result<_>>()?;
    let by_id: HashMap<(&str, u32), &[Token]> = responses
        .iter()
        .map(|r| ((r.prompt_id.as_str(), r.response_id), r.tokens.as_slice()))
        .collect();
    pairs
        .iter()
        .map(|p| {
            let prompt = prompt_tokens
                .get(p.prompt_id.as_str())
                .ok_or_else(|| Error::Schema(format!("unknown prompt id `{}`", p.prompt_id)))?;
            let get = |id: u32| {
                by_id
                    .get(&(p.prompt_id.as_str(), id))
                    .map(|t| t.to_vec())
                    .ok_or_else(|| Error::Schema(format!("unknown response {id} for `{}`", p.prompt_id)))
            };
            Ok(PairExample {
                prompt: prompt.clone(),
                chosen: get(p.chosen_id)?,
                rejected: get(p.rejected_id)?,
            })
        })
        .collect()
}

/// Trains a fresh reward model with the configured preset on a seeded
/// train/held-out split of `examples`.
pub fn trained_reward_model(config: &RunConfig, examples: &[PairExample]) -> Result<(RewardModel, Vec<EpochStats>)> {
    let seed = stage_seed(config.seed, Stage::RewardTrain);
    let (train, held) = split_held_out(examples, config.reward.held_out_fraction, seed);
    let backbone = config.reward.preset.backbone(config.actor.vocab_size, config.actor.context_length);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, Stage::RewardInit));
    let mut reward = RewardModel::init(backbone, &mut rng)?;
    let stats = train_reward(&mut reward, &train, &held, &config.reward, seed)?;
    Ok((reward, stats))
}

/// The four RLHF models: reference snapshotted from the warm-started actor,
/// critic sharing its backbone with a fresh zero head.
pub fn rlhf_models(actor: PolicyModel, reward: RewardModel) -> RlhfModels {
    RlhfModels {
        reference: actor.snapshot_reference(),
        critic: CriticModel::from_policy(&actor),
        actor,
        reward,
    }
}

pub fn evaluate(config: &RunConfig, policy: &PolicyModel, eval_prompts: &[Vec<Token>]) -> Result<f64> {
    evaluate_quality(
        policy,
        eval_prompts,
        &config.task,
        config.ppo.max_response_tokens,
        config.evaluation.samples_per_prompt,
        stage_seed(config.seed, Stage::Evaluate),
    )
}

/// Everything before PPO.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub prompts: Vec<Vec<Token>>,
    pub eval_prompts: Vec<Vec<Token>>,
    pub actor: PolicyModel,
    pub reward: RewardModel,
    pub sft_nll: f64,
    pub pairs: usize,
    pub reward_curve: Vec<EpochStats>,
    pub baseline_quality: f64,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let (prompts, eval_prompts) = make_prompts(config)?;
    let (actor, sft_nll) = warm_started_actor(config, &prompts)?;
    let records = prompt_records(&prompts, prompt_id);
    let responses = generate_responses(&actor, &records, config, stage_seed(config.seed, Stage::Generate))?;
    let a = &config.annotation;
    let (rankings, _) = oracle_rankings(&config.task, &records, &responses, a.annotators, a.noise, stage_seed(config.seed, Stage::Annotate))?;
    let pairs = pairs_from_rankings(&rankings, PairSource::Oracle)?;
    let examples = pair_examples(&records, &responses, &pairs, config.actor.vocab_size)?;
    let (reward, reward_curve) = trained_reward_model(config, &examples)?;
    let baseline_quality = evaluate(config, &actor, &eval_prompts)?;
    Ok(Prepared {
        prompts,
        eval_prompts,
        actor,
        reward,
        sft_nll,
        pairs: pairs.len(),
        reward_curve,
        baseline_quality,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub sft_nll: f64,
    pub pairs: usize,
    pub reward_held_out_accuracy: Option<f64>,
    pub baseline_quality: f64,
    pub final_quality: f64,
    pub history: Vec<IterationMetrics>,
}

/// PPO from a prepared state, using `config.ppo` (which may differ from the
/// config `prepared` was built with, e.g. in ablations).
pub fn run_ppo<F>(config: &RunConfig, prepared: &Prepared, on_iteration: F) -> Result<(RlhfModels, PipelineReport)>
where
    F: FnMut(&IterationMetrics, &RlhfModels) -> Result<bool>,
{
    let mut models = rlhf_models(prepared.actor.clone(), prepared.reward.clone());
    let history = rlhf_train(
        &mut models,
        &prepared.prompts,
        &config.ppo,
        stage_seed(config.seed, Stage::Ppo),
        Some(&config.task),
        on_iteration,
    )?;
    let final_quality = evaluate(config, &models.actor, &prepared.eval_prompts)?;
    let report = PipelineReport {
        sft_nll: prepared.sft_nll,
        pairs: prepared.pairs,
        reward_held_out_accuracy: prepared.reward_curve.last().and_then(|s| s.held_out_accuracy),
        baseline_quality: prepared.baseline_quality,
        final_quality,
        history,
    };
    Ok((models, report))
}

pub fn run_pipeline<F>(config: &RunConfig, on_iteration: F) -> Result<(RlhfModels, PipelineReport)>
where
    F: FnMut(&IterationMetrics, &RlhfModels) -> Result<bool>,
{
    let prepared = prepare(config)?;
    run_ppo(config, &prepared, on_iteration)
}
