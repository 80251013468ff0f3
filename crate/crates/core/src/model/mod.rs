//! Tiny decoder-only transformers and the four pipeline roles built on them.
//!
//! Every role shares one backbone definition: token and learned positional
//! embeddings, pre-norm causal self-attention and MLP blocks, a final layer
//! norm, and either a vocabulary head (actor, reference) or a scalar head
//! (critic, reward).

mod forward;
mod infer;
mod roles;
pub mod text;

pub use infer::DecodeState;
pub use roles::{CriticModel, PolicyModel, ReferenceModel, RewardModel};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
/// First id usable for content; ids below are reserved.
pub const FIRST_CONTENT: Token = 3;

const INIT_STD: f64 = 0.02;
const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    LmHead,
    ScalarHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
}

/// About 50k parameters with an LM head over a 16-token vocabulary.
impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            context_length: 32,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::invalid(format!(
                "vocab_size must be at least 4 (PAD, BOS, EOS and one content token), got {}",
                self.vocab_size
            )));
        }
        if self.context_length == 0
            || self.embed_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
        {
            return Err(Error::invalid(format!(
                "backbone dimensions must be positive: {self:?}"
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Number of content tokens available to tasks.
    pub fn content_vocab(&self) -> usize {
        self.vocab_size - FIRST_CONTENT as usize
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_layout(&self, head: HeadKind) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = MLP_RATIO * d;
        let mut out = vec![
            ("tok_embed".to_string(), vec![self.vocab_size, d]),
            ("pos_embed".to_string(), vec![self.context_length, d]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w1"), vec![d, h]),
                (p("mlp.b1"), vec![h]),
                (p("mlp.w2"), vec![h, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        let out_dim = match head {
            HeadKind::LmHead => self.vocab_size,
            HeadKind::ScalarHead => 1,
        };
        out.push(("head.w".to_string(), vec![d, out_dim]));
        out.push(("head.b".to_string(), vec![out_dim]));
        out
    }

    pub fn parameter_count(&self, head: HeadKind) -> usize {
        self.parameter_layout(head)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Offsets into the flat parameter list.
pub(crate) mod slot {
    pub const TOK: usize = 0;
    pub const POS: usize = 1;
    pub const LAYER_BASE: usize = 2;
    pub const PER_LAYER: usize = 13;
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const BO: usize = 6;
    pub const LN2_G: usize = 7;
    pub const LN2_B: usize = 8;
    pub const W1: usize = 9;
    pub const B1: usize = 10;
    pub const W2: usize = 11;
    pub const B2: usize = 12;

    pub fn layer(l: usize, offset: usize) -> usize {
        LAYER_BASE + l * PER_LAYER + offset
    }

    /// (final gain, final bias, head weight, head bias)
    pub fn tail(num_layers: usize) -> (usize, usize, usize, usize) {
        let base = LAYER_BASE + num_layers * PER_LAYER;
        (base, base + 1, base + 2, base + 3)
    }
}

/// A backbone plus one head, holding its parameters as named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: BackboneConfig,
    head: HeadKind,
    params: Vec<Tensor>,
}

impl Transformer {
    /// Gaussian embeddings (std 0.02), Gaussian weight matrices (std 1/sqrt(fan_in)),
    /// unit layer-norm gains, zero biases and a zero head.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, head: HeadKind, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .parameter_layout(head)
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.starts_with("head.") || name.ends_with("bias") || is_bias(&name) {
                    vec![0.0; numel]
                } else if name.ends_with("gain") {
                    vec![1.0; numel]
                } else if !name.ends_with("embed") {
                    let fan_in = Normal::new(0.0, 1.0 / (shape[0] as f64).sqrt()).expect("valid std");
                    (0..numel).map(|_| fan_in.sample(rng)).collect()
                } else {
                    (0..numel).map(|_| normal.sample(rng)).collect()
                };
                Tensor::new(&shape, data).map(Tensor::with_grad)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            head,
            params,
        })
    }

    /// Builds a model from explicit tensors, checking them against the layout.
    pub fn from_parts(config: BackboneConfig, head: HeadKind, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout(head);
        if layout.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} expects shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let params = params
            .into_iter()
            .map(|t| t.detached().with_grad())
            .collect();
        Ok(Self {
            config,
            head,
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.config
            .parameter_layout(self.head)
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Keeps the backbone and swaps in a zero-initialized head of `head` kind.
    pub fn with_head(&self, head: HeadKind) -> Self {
        let mut params: Vec<Tensor> = self.params.iter().map(|t| t.detached().with_grad()).collect();
        params.truncate(params.len() - 2);
        let out_dim = match head {
            HeadKind::LmHead => self.config.vocab_size,
            HeadKind::ScalarHead => 1,
        };
        params.push(Tensor::zeros(&[self.config.embed_dim, out_dim]).with_grad());
        params.push(Tensor::zeros(&[out_dim]).with_grad());
        Self {
            config: self.config.clone(),
            head,
            params,
        }
    }

    /// Records every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p)
                } else {
                    tape.constant(p.detached())
                }
            })
            .collect()
    }

    /// Adds the gradients for `vars` (from [`Transformer::bind`]) into the parameters.
    pub fn accumulate(&mut self, grads: &crate::tensor::Gradients, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.context_length {
            return Err(Error::invalid(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.context_length
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bo") || name.ends_with(".b1") || name.ends_with(".b2")
}

/// Model input for a (prompt, response) pair: `[BOS] ++ prompt ++ response`.
pub fn join_sequence(prompt: &[Token], response: &[Token]) -> Vec<Token> {
    let mut seq = Vec::with_capacity(1 + prompt.len() + response.len());
    seq.push(BOS);
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(response);
    seq
}

/// Position whose hidden state predicts (or values) response token `t`.
pub(crate) fn response_state_positions(prompt_len: usize, response_len: usize) -> Vec<usize> {
    (0..response_len).map(|t| prompt_len + t).collect()
}
