//! Supervised warm-start: next-token cross-entropy on demonstration responses.

use crate::error::{Error, Result};
use crate::model::{PolicyModel, Token, EOS, FIRST_CONTENT};
use crate::tensor::{Adam, AdamConfig, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Length range of generated demonstration responses, before EOS.
    pub demo_min_len: usize,
    pub demo_max_len: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 3,
            batch_size: 16,
            demo_min_len: 4,
            demo_max_len: 12,
        }
    }
}

/// Random content responses of length `min_len..=max_len` closed by EOS.
pub fn random_demonstrations(
    prompts: &[Vec<Token>],
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    if min_len == 0 || min_len > max_len || vocab_size <= FIRST_CONTENT as usize {
        return Err(Error::invalid("bad demonstration length range or vocabulary"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(prompts
        .iter()
        .map(|p| {
            let len = rng.random_range(min_len..=max_len);
            let mut response: Vec<Token> = (0..len)
                .map(|_| rng.random_range(FIRST_CONTENT..vocab_size as Token))
                .collect();
            response.push(EOS);
            Demonstration {
                prompt: p.clone(),
                response,
            }
        })
        .collect())
}

/// Mean per-token negative log-likelihood of the demonstrations.
pub fn demonstration_nll(policy: &PolicyModel, demos: &[Demonstration]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for d in demos {
        let lp = policy.sequence_log_probs(&d.prompt, &d.response)?;
        total -= lp.iter().sum::<f64>();
        tokens += lp.len();
    }
    if tokens == 0 {
        return Err(Error::invalid("no demonstration tokens"));
    }
    Ok(total / tokens as f64)
}

/// Fits `policy` to `demos`, shuffling with `seed`; returns the mean
/// training NLL of each epoch.
pub fn warm_start(policy: &mut PolicyModel, demos: &[Demonstration], config: &SftConfig, seed: u64) -> Result<Vec<f64>> {
    if demos.is_empty() || config.batch_size == 0 {
        return Err(Error::invalid("warm-start needs demonstrations and batch_size >= 1"));
    }
    let mut opt = Adam::new(policy.net().params(), AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut tape = Tape::new();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let n: usize = chunk.iter().map(|&i| demos[i].response.len()).sum();
            policy.net_mut().zero_grad();
            for &i in chunk {
                let d = &demos[i];
                tape.clear();
                let vars = policy.net().bind(&mut tape, true);
                let lp = policy.log_probs_taped(&mut tape, &vars, &d.prompt, &d.response)?;
                let total = tape.sum(lp);
                let loss = tape.scale(total, -1.0 / n as f64);
                let value = tape.value(total).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("demonstration log-likelihood {value}")));
                }
                nll -= value;
                let grads = tape.backward(loss)?;
                policy.net_mut().accumulate(&grads, &vars)?;
            }
            count += n;
            opt.step(policy.net_mut().params_mut())?;
        }
        history.push(nll / count as f64);
    }
    policy.net_mut().zero_grad();
    Ok(history)
}
