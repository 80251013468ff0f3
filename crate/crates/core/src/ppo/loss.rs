use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `min(rho * A, clamp(rho, 1 - eps, 1 + eps) * A)` for one token.
pub fn ppo_token_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// `max((V - ret)^2, (V_old + clamp(V - V_old, -c, c) - ret)^2)` for one token.
pub fn critic_token_loss(value: f64, old_value: f64, ret: f64, clip: f64) -> f64 {
    let clipped = old_value + (value - old_value).clamp(-clip, clip);
    (value - ret).powi(2).max((clipped - ret).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActorLossStats {
    /// Tokens whose ratio fell outside `[1 - eps, 1 + eps]`.
    pub clipped: usize,
    pub tokens: usize,
}

fn constant_like(tape: &Tape, like: Var, data: &[f64], what: &str) -> Result<Tensor> {
    let shape = tape.shape(like).to_vec();
    let t = Tensor::new(&shape, data.to_vec()).map_err(|_| {
        Error::invalid(format!(
            "{what} has {} entries, expected shape {shape:?}",
            data.len()
        ))
    })?;
    Ok(t)
}

/// Negated sum of clipped surrogate objectives over one trajectory. Divide by
/// the batch token count to get the mean loss.
pub fn actor_loss_taped(
    tape: &mut Tape,
    new_log_probs: Var,
    old_log_probs: &[f64],
    advantages: &[f64],
    epsilon: f64,
) -> Result<(Var, ActorLossStats)> {
    let old = constant_like(tape, new_log_probs, old_log_probs, "old log-probs")?;
    let adv = constant_like(tape, new_log_probs, advantages, "advantages")?;
    let old = tape.constant(old);
    let adv = tape.constant(adv);
    let diff = tape.sub(new_log_probs, old)?;
    let ratio = tape.exp(diff);
    let unclipped = tape.mul(ratio, adv)?;
    let clamped = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon)?;
    let clipped = tape.mul(clamped, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let total = tape.sum(surrogate);
    let stats = ActorLossStats {
        clipped: tape
            .value(ratio)
            .data()
            .iter()
            .filter(|r| (**r - 1.0).abs() > epsilon)
            .count(),
        tokens: old_log_probs.len(),
    };
    Ok((tape.neg(total), stats))
}

/// Sum of clipped value losses over one trajectory.
pub fn critic_loss_taped(
    tape: &mut Tape,
    values: Var,
    old_values: &[f64],
    returns: &[f64],
    clip: f64,
) -> Result<Var> {
    let old = constant_like(tape, values, old_values, "old values")?;
    let ret = constant_like(tape, values, returns, "returns")?;
    let old = tape.constant(old);
    let ret = tape.constant(ret);
    let err = tape.sub(values, ret)?;
    let plain = tape.mul(err, err)?;
    let delta = tape.sub(values, old)?;
    let delta = tape.clamp(delta, -clip, clip)?;
    let moved = tape.add(old, delta)?;
    let clipped_err = tape.sub(moved, ret)?;
    let clipped = tape.mul(clipped_err, clipped_err)?;
    let worst = tape.maximum(plain, clipped)?;
    Ok(tape.sum(worst))
}
