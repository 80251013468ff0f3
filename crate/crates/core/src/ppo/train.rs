use super::loss::{actor_loss_taped, critic_loss_taped};
use super::{normalize_advantages, PpoConfig, Trajectory};
use crate::error::{Error, Result};
use crate::model::{CriticModel, PolicyModel, ReferenceModel, RewardModel, Token, Transformer};
use crate::oracle::OracleTask;
use crate::sampling::{derive_seed, rng_for, sample_response, sample_traced, SamplerConfig};
use crate::tensor::{Adam, AdamConfig, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// The four networks of an RLHF run.
#[derive(Debug, Clone)]
pub struct RlhfModels {
    pub actor: PolicyModel,
    pub reference: ReferenceModel,
    pub critic: CriticModel,
    pub reward: RewardModel,
}

/// Per-iteration training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_response_len: f64,
    pub oracle_quality: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub clip_fraction: f64,
}

/// Exact `KL(p || q)` between two log-distributions.
fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

/// Samples one response from the actor at temperature 1 and scores it with
/// the frozen models. Also returns the summed per-position KL to the reference.
pub fn rollout(models: &RlhfModels, prompt: &[Token], max_response_tokens: usize, seed: u64) -> Result<(Trajectory, f64)> {
    let cfg = SamplerConfig::new(max_response_tokens, seed);
    let trace = sample_traced(&models.actor, prompt, &cfg, &mut rng_for(seed))?;
    let old = trace.log_probs();
    let ref_rows = models.reference.response_log_softmax(prompt, &trace.tokens)?;
    let ref_lp = ref_rows.iter().zip(&trace.tokens).map(|(r, &a)| r[a as usize]).collect();
    let kl = trace.log_softmax.iter().zip(&ref_rows).map(|(p, q)| kl_rows(p, q)).sum();
    let values = models.critic.value_estimates(prompt, &trace.tokens)?;
    let score = models.reward.score(prompt, &trace.tokens)?;
    let traj = Trajectory::new(prompt.to_vec(), trace.tokens, old, ref_lp, values, score)?;
    Ok((traj, kl))
}

/// Optimizer state for actor and critic across iterations.
#[derive(Debug, Clone)]
pub struct PpoTrainer {
    config: PpoConfig,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl PpoTrainer {
    pub fn new(config: PpoConfig, models: &RlhfModels) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            actor_opt: Adam::new(models.actor.net().params(), AdamConfig::with_lr(config.actor_lr)),
            critic_opt: Adam::new(models.critic.net().params(), AdamConfig::with_lr(config.critic_lr)),
            config,
        })
    }

    pub fn config(&self) -> &PpoConfig {
        &self.config
    }

    /// Runs `ppo_epochs` actor and critic updates on a rollout batch.
    /// Advantages are computed here from the rollout-time quantities.
    pub fn step(&mut self, models: &mut RlhfModels, batch: &mut [Trajectory]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("PPO step needs at least one trajectory"));
        }
        let cfg = self.config.clone();
        for t in batch.iter_mut() {
            t.actor_log_probs = t.old_log_probs.clone();
            t.finalize(&cfg);
        }
        let raw: Vec<f64> = batch
            .iter()
            .flat_map(|t| t.advantages.clone().expect("finalized"))
            .collect();
        let tokens = raw.len() as f64;
        let mut totals = StepStats::default();
        let mut tape = Tape::new();
        for _ in 0..cfg.ppo_epochs {
            let advantages = if cfg.normalize_advantages && raw.len() >= 2 {
                normalize_advantages(&raw)?
            } else {
                raw.clone()
            };
            let mut actor_loss = 0.0;
            let mut clipped = 0;
            models.actor.net_mut().zero_grad();
            let mut offset = 0;
            for t in batch.iter_mut() {
                tape.clear();
                let vars = models.actor.net().bind(&mut tape, true);
                let lp = models.actor.log_probs_taped(&mut tape, &vars, &t.prompt, &t.response)?;
                let adv = &advantages[offset..offset + t.len()];
                offset += t.len();
                let (loss, stats) = actor_loss_taped(&mut tape, lp, &t.old_log_probs, adv, cfg.clip_epsilon)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("actor loss {value}")));
                }
                t.actor_log_probs = tape.value(lp).data().to_vec();
                actor_loss += value;
                clipped += stats.clipped;
                let scaled = tape.scale(loss, 1.0 / tokens);
                let grads = tape.backward(scaled)?;
                models.actor.net_mut().accumulate(&grads, &vars)?;
            }
            self.actor_opt.step(models.actor.net_mut().params_mut())?;

            let mut critic_loss = 0.0;
            models.critic.net_mut().zero_grad();
            for t in batch.iter() {
                tape.clear();
                let vars = models.critic.net().bind(&mut tape, true);
                let v = models.critic.values_taped(&mut tape, &vars, &t.prompt, &t.response)?;
                let returns = t.returns.as_deref().expect("finalized");
                let loss = critic_loss_taped(&mut tape, v, &t.values, returns, cfg.value_clip)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("critic loss {value}")));
                }
                critic_loss += value;
                let scaled = tape.scale(loss, 1.0 / tokens);
                let grads = tape.backward(scaled)?;
                models.critic.net_mut().accumulate(&grads, &vars)?;
            }
            self.critic_opt.step(models.critic.net_mut().params_mut())?;

            totals.actor_loss += actor_loss / tokens;
            totals.critic_loss += critic_loss / tokens;
            totals.clip_fraction += clipped as f64 / tokens;
        }
        models.actor.net_mut().zero_grad();
        models.critic.net_mut().zero_grad();
        let epochs = cfg.ppo_epochs as f64;
        Ok(StepStats {
            actor_loss: totals.actor_loss / epochs,
            critic_loss: totals.critic_loss / epochs,
            clip_fraction: totals.clip_fraction / epochs,
        })
    }

    /// One rollout-and-update iteration. On error, actor and critic are
    /// restored to their state before the iteration.
    pub fn iteration(
        &mut self,
        models: &mut RlhfModels,
        prompts: &[Vec<Token>],
        iteration: usize,
        seed: u64,
        oracle: Option<&OracleTask>,
    ) -> Result<IterationMetrics> {
        if prompts.is_empty() {
            return Err(Error::invalid("PPO needs at least one prompt"));
        }
        let mut pick = rng_for(derive_seed(seed, iteration as u64, 0));
        let mut batch = Vec::with_capacity(self.config.rollout_batch_size);
        let mut kl_sum = 0.0;
        let mut quality = 0.0;
        for j in 0..self.config.rollout_batch_size {
            let prompt = &prompts[pick.random_range(0..prompts.len())];
            let sample_seed = derive_seed(seed, iteration as u64, j as u64 + 1);
            let (traj, kl) = rollout(models, prompt, self.config.max_response_tokens, sample_seed)?;
            if let Some(task) = oracle {
                quality += task.quality(prompt, &traj.response)?;
            }
            kl_sum += kl;
            batch.push(traj);
        }
        let n = batch.len() as f64;
        let tokens: usize = batch.iter().map(Trajectory::len).sum();
        let mean_reward = batch.iter().map(|t| t.reward_score).sum::<f64>() / n;

        let saved: (Transformer, Transformer) = (models.actor.net().clone(), models.critic.net().clone());
        let saved_opt = (self.actor_opt.clone(), self.critic_opt.clone());
        let stats = match self.step(models, &mut batch) {
            Ok(s) => s,
            Err(e) => {
                *models.actor.net_mut() = saved.0;
                *models.critic.net_mut() = saved.1;
                (self.actor_opt, self.critic_opt) = saved_opt;
                return Err(e);
            }
        };
        Ok(IterationMetrics {
            iteration,
            mean_reward,
            mean_kl: kl_sum / tokens as f64,
            clip_fraction: stats.clip_fraction,
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
            mean_response_len: tokens as f64 / n,
            oracle_quality: oracle.map(|_| quality / n),
        })
    }
}

/// Runs `config.iterations` PPO iterations, fully determined by `seed`.
/// `on_iteration` sees each iteration's metrics and the updated models; it
/// may return `Ok(false)` to stop early, and its errors abort the run.
pub fn rlhf_train<F>(
    models: &mut RlhfModels,
    prompts: &[Vec<Token>],
    config: &PpoConfig,
    seed: u64,
    oracle: Option<&OracleTask>,
    mut on_iteration: F,
) -> Result<Vec<IterationMetrics>>
where
    F: FnMut(&IterationMetrics, &RlhfModels) -> Result<bool>,
{
    let mut trainer = PpoTrainer::new(config.clone(), models)?;
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let m = trainer.iteration(models, prompts, it, seed, oracle)?;
        history.push(m);
        if !on_iteration(&m, models)? {
            break;
        }
    }
    Ok(history)
}

/// Mean oracle quality of `samples` temperature-1 responses per prompt.
pub fn evaluate_quality(
    policy: &PolicyModel,
    prompts: &[Vec<Token>],
    task: &OracleTask,
    max_response_tokens: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() || samples == 0 {
        return Err(Error::invalid("evaluation needs prompts and at least one sample"));
    }
    let mut total = 0.0;
    for (i, prompt) in prompts.iter().enumerate() {
        for s in 0..samples {
            let cfg = SamplerConfig::new(max_response_tokens, derive_seed(seed, i as u64, s as u64));
            let response = sample_response(policy, prompt, &cfg)?;
            total += task.quality(prompt, &response)?;
        }
    }
    Ok(total / (prompts.len() * samples) as f64)
}
