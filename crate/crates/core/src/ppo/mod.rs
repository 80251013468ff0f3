//! PPO-based RLHF: KL-shaped rewards, TD residuals, GAE, advantage
//! normalization, the clipped surrogate objective and clipped value regression.

mod loss;
mod train;

pub use loss::{actor_loss_taped, critic_loss_taped, critic_token_loss, ppo_token_objective, ActorLossStats};
pub use train::{
    evaluate_quality, rlhf_train, rollout, IterationMetrics, PpoTrainer, RlhfModels, StepStats,
};

use crate::error::{Error, Result};
use crate::model::Token;
use serde::{Deserialize, Serialize};

/// Per-token KL terms are clamped to `[-KL_CLAMP, KL_CLAMP]` before scaling.
pub const KL_CLAMP: f64 = 10.0;
/// Floor on the batch standard deviation used for normalization.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_epsilon: f64,
    pub kl_coef: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub value_clip: f64,
    pub ppo_epochs: usize,
    pub rollout_batch_size: usize,
    pub normalize_advantages: bool,
    pub iterations: usize,
    /// Response cap during rollouts.
    pub max_response_tokens: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lambda: 0.95,
            clip_epsilon: 0.2,
            kl_coef: 0.1,
            actor_lr: 5e-6,
            critic_lr: 5e-7,
            value_clip: 0.2,
            ppo_epochs: 4,
            rollout_batch_size: 16,
            normalize_advantages: true,
            iterations: 200,
            max_response_tokens: 16,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.clip_epsilon) {
            return Err(Error::invalid(format!("clip_epsilon must lie in (0, 1), got {}", self.clip_epsilon)));
        }
        if !open_unit(self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.kl_coef < 0.0 || self.value_clip <= 0.0 || self.actor_lr < 0.0 || self.critic_lr < 0.0 {
            return Err(Error::invalid("kl_coef and learning rates must be >= 0, value_clip > 0"));
        }
        if self.ppo_epochs == 0 || self.rollout_batch_size == 0 || self.max_response_tokens == 0 {
            return Err(Error::invalid(
                "ppo_epochs, rollout_batch_size and max_response_tokens must be at least 1",
            ));
        }
        Ok(())
    }
}

/// One prompt/response episode with everything PPO needs per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// Actor log-probabilities, refreshed whenever the actor is re-evaluated.
    pub actor_log_probs: Vec<f64>,
    /// Behaviour-policy log-probabilities frozen at rollout time.
    pub old_log_probs: Vec<f64>,
    pub ref_log_probs: Vec<f64>,
    /// Critic values frozen at rollout time.
    pub values: Vec<f64>,
    /// Terminal reward-model score `R(s, a)`.
    pub reward_score: f64,
    pub rewards: Vec<f64>,
    pub advantages: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(
        prompt: Vec<Token>,
        response: Vec<Token>,
        old_log_probs: Vec<f64>,
        ref_log_probs: Vec<f64>,
        values: Vec<f64>,
        reward_score: f64,
    ) -> Result<Self> {
        let t = response.len();
        if t == 0 {
            return Err(Error::invalid("trajectory needs at least one response token"));
        }
        if old_log_probs.len() != t || ref_log_probs.len() != t || values.len() != t {
            return Err(Error::invalid(format!(
                "per-token arrays must have length {t}: log-probs {}, reference {}, values {}",
                old_log_probs.len(),
                ref_log_probs.len(),
                values.len()
            )));
        }
        Ok(Self {
            prompt,
            response,
            actor_log_probs: old_log_probs.clone(),
            old_log_probs,
            ref_log_probs,
            values,
            reward_score,
            rewards: vec![0.0; t],
            advantages: None,
            returns: None,
        })
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Fills `rewards`, then `advantages` and `returns`.
    pub fn finalize(&mut self, config: &PpoConfig) {
        self.rewards = shape_rewards_with_kl(
            &self.actor_log_probs,
            &self.ref_log_probs,
            self.reward_score,
            config.kl_coef,
        );
        let deltas = td_residuals(&self.rewards, &self.values, config.gamma);
        let (adv, ret) = compute_gae(&deltas, &self.values, config.gamma, config.lambda);
        self.advantages = Some(adv);
        self.returns = Some(ret);
    }
}

/// `r_t = -beta * clamp(log pi_act - log pi_ref)`, with `R(s, a)` added at the last token.
pub fn shape_rewards_with_kl(actor_log_probs: &[f64], ref_log_probs: &[f64], reward_score: f64, beta: f64) -> Vec<f64> {
    let mut rewards: Vec<f64> = actor_log_probs
        .iter()
        .zip(ref_log_probs)
        .map(|(a, r)| -beta * (a - r).clamp(-KL_CLAMP, KL_CLAMP))
        .collect();
    if let Some(last) = rewards.last_mut() {
        *last += reward_score;
    }
    rewards
}

/// `delta_t = r_t + gamma * V_{t+1} - V_t`, bootstrapping `V_{T+1} = 0`.
pub fn td_residuals(rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            let next = values.get(t + 1).copied().unwrap_or(0.0);
            rewards[t] + gamma * next - values[t]
        })
        .collect()
}

/// Backward recursion `A_t = delta_t + gamma * lambda * A_{t+1}`; returns are `A_t + V_t`.
pub fn compute_gae(deltas: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = vec![0.0; deltas.len()];
    let mut running = 0.0;
    for t in (0..deltas.len()).rev() {
        running = deltas[t] + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Standardizes with the population std over the whole batch, floored at
/// [`STD_FLOOR`].
pub fn normalize_advantages(advantages: &[f64]) -> Result<Vec<f64>> {
    if advantages.len() < 2 {
        return Err(Error::invalid("normalization needs at least two advantage values"));
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    Ok(advantages.iter().map(|a| (a - mean) / std).collect())
}
