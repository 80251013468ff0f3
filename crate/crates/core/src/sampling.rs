//! Autoregressive response sampling with temperature, top-k and a length cap.

use crate::error::{Error, Result};
use crate::model::{DecodeState, PolicyModel, Token, BOS, EOS};
use crate::tensor::kernels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Softmax temperature; `0.0` selects greedy argmax decoding.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Keep only the `top_k` highest logits; `None` keeps the full vocabulary.
    #[serde(default)]
    pub top_k: Option<usize>,
    pub max_response_tokens: usize,
    #[serde(default = "default_k")]
    pub k_responses: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_k() -> usize {
    5
}

impl SamplerConfig {
    pub fn new(max_response_tokens: usize, seed: u64) -> Self {
        Self {
            temperature: default_temperature(),
            top_k: None,
            max_response_tokens,
            k_responses: default_k(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if self.max_response_tokens == 0 {
            return Err(Error::invalid("max_response_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// A sampled response together with the seed that reproduces it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub tokens: Vec<Token>,
    pub seed: u64,
}

/// Indices of the `k` largest logits; equal logits favour the lower id.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.min(logits.len()));
    idx
}

/// The distribution actually sampled from, after temperature and top-k.
/// Greedy mode puts all mass on the first argmax.
pub fn next_token_probs(logits: &[f64], temperature: f64, top_k: Option<usize>) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    if temperature == 0.0 {
        probs[top_k_indices(logits, 1)[0]] = 1.0;
        return probs;
    }
    let keep = top_k_indices(logits, top_k.unwrap_or(logits.len()));
    let scaled: Vec<f64> = keep.iter().map(|&i| logits[i] / temperature).collect();
    let mut kept = vec![0.0; keep.len()];
    kernels::softmax_into(&scaled, &mut kept);
    for (&i, p) in keep.iter().zip(kept) {
        probs[i] = p;
    }
    probs
}

/// Inverse-CDF draw from `probs`.
pub fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

fn check_budget(policy: &PolicyModel, prompt: &[Token], config: &SamplerConfig) -> Result<()> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must not be empty"));
    }
    let needed = 1 + prompt.len() + config.max_response_tokens;
    let ctx = policy.net().config().context_length;
    if needed > ctx {
        return Err(Error::invalid(format!(
            "prompt of {} tokens plus {} response tokens exceeds context length {ctx}",
            prompt.len(),
            config.max_response_tokens
        )));
    }
    Ok(())
}

/// Samples one response using `rng`; stops after EOS (kept) or at the cap.
pub fn sample_with_rng<R: Rng + ?Sized>(
    policy: &PolicyModel,
    prompt: &[Token],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Token>> {
    Ok(sample_inner(policy, prompt, config, rng, false)?.tokens)
}

/// A response plus the untempered next-token log-distribution at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub tokens: Vec<Token>,
    pub log_softmax: Vec<Vec<f64>>,
}

impl SampleTrace {
    /// `log pi(a_t | ...)` for each sampled token.
    pub fn log_probs(&self) -> Vec<f64> {
        self.log_softmax
            .iter()
            .zip(&self.tokens)
            .map(|(row, &a)| row[a as usize])
            .collect()
    }
}

/// Like [`sample_with_rng`], also recording the model's distributions.
pub fn sample_traced<R: Rng + ?Sized>(
    policy: &PolicyModel,
    prompt: &[Token],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleTrace> {
    sample_inner(policy, prompt, config, rng, true)
}

fn sample_inner<R: Rng + ?Sized>(
    policy: &PolicyModel,
    prompt: &[Token],
    config: &SamplerConfig,
    rng: &mut R,
    trace: bool,
) -> Result<SampleTrace> {
    check_budget(policy, prompt, config)?;
    let net = policy.net();
    let mut state = DecodeState::new(net);
    state.push(BOS)?;
    let mut hidden = Vec::new();
    for &t in prompt {
        hidden = state.push(t)?;
    }
    let mut out = SampleTrace {
        tokens: Vec::with_capacity(config.max_response_tokens),
        log_softmax: Vec::new(),
    };
    loop {
        let logits = net.head_row(&hidden);
        let probs = next_token_probs(&logits, config.temperature, config.top_k);
        let token = draw(&probs, rng) as Token;
        if trace {
            let lse = kernels::log_sum_exp(&logits);
            out.log_softmax.push(logits.iter().map(|l| l - lse).collect());
        }
        out.tokens.push(token);
        if token == EOS || out.tokens.len() == config.max_response_tokens {
            break;
        }
        hidden = state.push(token)?;
    }
    Ok(out)
}

/// Mixes `base` with two indices into a well-spread 64-bit seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One response, reproducible from `config.seed`.
pub fn sample_response(policy: &PolicyModel, prompt: &[Token], config: &SamplerConfig) -> Result<Vec<Token>> {
    sample_with_rng(policy, prompt, config, &mut rng_for(config.seed))
}

/// `k_responses` responses drawn with seeds `seed, seed + 1, ...`; duplicates are kept.
pub fn sample_k_responses(
    policy: &PolicyModel,
    prompt: &[Token],
    config: &SamplerConfig,
) -> Result<Vec<SampledResponse>> {
    if config.k_responses == 0 {
        return Err(Error::invalid("k_responses must be at least 1"));
    }
    (0..config.k_responses as u64)
        .map(|i| {
            let seed = config.seed.wrapping_add(i);
            let tokens = sample_with_rng(policy, prompt, config, &mut rng_for(seed))?;
            Ok(SampledResponse { tokens, seed })
        })
        .collect()
}
