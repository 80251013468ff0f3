//! Shared fixtures for the criterion benches.

use deskrlhf_core::model::{BackboneConfig, PolicyModel, Token};
use deskrlhf_core::sampling::rng_for;

/// A policy at the default shape with deterministic weights.
pub fn policy(seed: u64) -> PolicyModel {
    PolicyModel::init(BackboneConfig::default(), &mut rng_for(seed)).expect("default config is valid")
}

/// A prompt and response filling most of the default context.
pub fn episode(len: usize) -> (Vec<Token>, Vec<Token>) {
    let prompt = (0..4).map(|i| 3 + i as Token).collect();
    let response = (0..len).map(|i| 3 + (i % 12) as Token).collect();
    (prompt, response)
}
