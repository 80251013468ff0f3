//! Reward-model training with the pairwise margin hinge
//! `max(0, margin - R(s, chosen) + R(s, rejected))`.

use crate::error::{Error, Result};
use crate::model::{BackboneConfig, RewardModel, Token};
use crate::tensor::{Adam, AdamConfig, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub fn pairwise_loss(score_chosen: f64, score_rejected: f64, margin: f64) -> f64 {
    (margin - score_chosen + score_rejected).max(0.0)
}

/// Taped hinge; the subgradient at the corner is 0.
pub fn pairwise_loss_taped(tape: &mut Tape, chosen: Var, rejected: Var, margin: f64) -> Result<Var> {
    let m = tape.scalar(margin);
    let gap = tape.sub(m, chosen)?;
    let shifted = tape.add(gap, rejected)?;
    Ok(tape.relu(shifted))
}

/// Backbone sizes for the reward-capacity comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardPreset {
    Small,
    Large,
}

impl RewardPreset {
    pub fn backbone(self, vocab_size: usize, context_length: usize) -> BackboneConfig {
        let num_layers = match self {
            RewardPreset::Small => 1,
            RewardPreset::Large => 2,
        };
        BackboneConfig {
            vocab_size,
            context_length,
            embed_dim: 16,
            num_layers,
            num_heads: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub held_out_fraction: f64,
    pub preset: RewardPreset,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.0,
            lr: 3e-3,
            batch_size: 16,
            epochs: 10,
            held_out_fraction: 0.2,
            preset: RewardPreset::Small,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "held_out_fraction must lie in (0, 1), got {}",
                self.held_out_fraction
            )));
        }
        if self.margin < 0.0 || !self.margin.is_finite() {
            return Err(Error::invalid(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Token-level content of one preference pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub held_out_accuracy: Option<f64>,
}

/// Seeded shuffle, then the last `fraction` of pairs (at least one) are held out.
pub fn split_held_out(pairs: &[PairExample], fraction: f64, seed: u64) -> (Vec<PairExample>, Vec<PairExample>) {
    let mut all = pairs.to_vec();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((all.len() as f64 * fraction).round() as usize).clamp(1, all.len().saturating_sub(1).max(1));
    let held = all.split_off(all.len() - n_held);
    (all, held)
}

/// Fraction of pairs with `score(chosen) > score(rejected)`; ties count one half.
pub fn eval_pairwise_accuracy(model: &RewardModel, pairs: &[PairExample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("accuracy needs at least one pair"));
    }
    let mut hits = 0.0;
    for p in pairs {
        let c = model.score(&p.prompt, &p.chosen)?;
        let r = model.score(&p.prompt, &p.rejected)?;
        hits += if c > r {
            1.0
        } else if c == r {
            0.5
        } else {
            0.0
        };
    }
    Ok(hits / pairs.len() as f64)
}

/// Mean hinge over `batch`, with its gradient accumulated into the model.
pub fn batch_loss_and_grad(model: &mut RewardModel, batch: &[PairExample], margin: f64) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut tape = Tape::new();
    for p in batch {
        tape.clear();
        let vars = model.net().bind(&mut tape, true);
        let c = model.score_taped(&mut tape, &vars, &p.prompt, &p.chosen)?;
        let r = model.score_taped(&mut tape, &vars, &p.prompt, &p.rejected)?;
        let loss = pairwise_loss_taped(&mut tape, c, r, margin)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "reward loss {value} (chosen score {}, rejected score {})",
                tape.value(c).item(),
                tape.value(r).item()
            )));
        }
        total += value;
        if value > 0.0 {
            let scaled = tape.scale(loss, scale);
            let grads = tape.backward(scaled)?;
            model.net_mut().accumulate(&grads, &vars)?;
        }
    }
    Ok(total * scale)
}

/// Trains `model` in place; `seed` drives the batch order. Returns per-epoch
/// statistics.
pub fn train_reward(
    model: &mut RewardModel,
    train: &[PairExample],
    held_out: &[PairExample],
    config: &RewardTrainConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("reward training needs at least one pair"));
    }
    let mut opt = Adam::new(model.net().params(), AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PairExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            model.net_mut().zero_grad();
            let loss = batch_loss_and_grad(model, &batch, config.margin)?;
            loss_sum += loss * batch.len() as f64;
            opt.step(model.net_mut().params_mut())?;
        }
        stats.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            held_out_accuracy: if held_out.is_empty() {
                None
            } else {
                Some(eval_pairwise_accuracy(model, held_out)?)
            },
        });
    }
    model.net_mut().zero_grad();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, Transformer};

    #[test]
    fn hinge_examples() {
        assert_eq!(pairwise_loss(2.0, 1.0, 0.0), 0.0);
        assert_eq!(pairwise_loss(1.0, 2.0, 0.0), 1.0);
        assert_eq!(pairwise_loss(2.0, 1.0, 1.5), 0.5);
    }

    #[test]
    fn taped_hinge_matches_and_has_zero_corner_gradient() {
        let mut tape = Tape::new();
        let c = tape.leaf(&crate::Tensor::scalar(1.0));
        let r = tape.leaf(&crate::Tensor::scalar(1.0));
        let l = pairwise_loss_taped(&mut tape, c, r, 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(c).unwrap(), &[0.0]);
        assert_eq!(g.wrt(r).unwrap(), &[0.0]);
    }

    fn model(seed: u64) -> RewardModel {
        let cfg = RewardPreset::Small.backbone(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RewardModel::new(Transformer::init(cfg, HeadKind::ScalarHead, &mut rng).unwrap()).unwrap()
    }

    #[test]
    fn untrained_zero_head_scores_ties() {
        let m = model(0);
        let pairs = vec![PairExample {
            prompt: vec![3],
            chosen: vec![4, 5],
            rejected: vec![6, 7],
        }];
        assert_eq!(eval_pairwise_accuracy(&m, &pairs).unwrap(), 0.5);
        assert!(eval_pairwise_accuracy(&m, &[]).is_err());
    }

    #[test]
    fn identical_pair_gives_zero_loss_and_gradient() {
        let mut m = model(1);
        let batch = vec![PairExample {
            prompt: vec![3],
            chosen: vec![4, 5],
            rejected: vec![4, 5],
        }];
        let loss = batch_loss_and_grad(&mut m, &batch, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(m.net().params().iter().all(|p| p.grad().is_none()));
    }

    #[test]
    fn held_out_split() {
        let pairs: Vec<PairExample> = (0..10)
            .map(|i| PairExample {
                prompt: vec![3 + i],
                chosen: vec![4],
                rejected: vec![5],
            })
            .collect();
        let (train, held) = split_held_out(&pairs, 0.2, 3);
        assert_eq!((train.len(), held.len()), (8, 2));
        let bad = RewardTrainConfig {
            held_out_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
