use super::{
    join_sequence, response_state_positions, BackboneConfig, HeadKind, Token, Transformer, PAD,
};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};
use rand::Rng;

fn require_head(net: &Transformer, head: HeadKind, role: &str) -> Result<()> {
    if net.head() != head {
        return Err(Error::invalid(format!(
            "{role} needs a {head:?} backbone, got {:?}",
            net.head()
        )));
    }
    Ok(())
}

fn check_response(net: &Transformer, prompt: &[Token], response: &[Token]) -> Result<Vec<Token>> {
    if response.is_empty() {
        return Err(Error::invalid("response must contain at least one token"));
    }
    let seq = join_sequence(prompt, response);
    net.check_tokens(&seq)?;
    Ok(seq)
}

/// Log-softmax rows for each response position, tape-free.
fn response_log_softmax(net: &Transformer, prompt: &[Token], response: &[Token]) -> Result<Vec<Vec<f64>>> {
    let seq = check_response(net, prompt, response)?;
    let hidden = net.hidden_states(&seq[..seq.len() - 1])?;
    Ok(response_state_positions(prompt.len(), response.len())
        .into_iter()
        .map(|pos| {
            let logits = net.head_row(&hidden[pos]);
            let lse = kernels::log_sum_exp(&logits);
            logits.iter().map(|l| l - lse).collect()
        })
        .collect())
}

fn response_log_probs(net: &Transformer, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
    Ok(response_log_softmax(net, prompt, response)?
        .iter()
        .zip(response)
        .map(|(row, &a)| row[a as usize])
        .collect())
}

/// Per-token log-probabilities `[R]` recorded on `tape`.
fn response_log_probs_taped(
    net: &Transformer,
    tape: &mut Tape,
    vars: &[Var],
    prompt: &[Token],
    response: &[Token],
) -> Result<Var> {
    let seq = check_response(net, prompt, response)?;
    let hidden = net.hidden_taped(tape, vars, &seq[..seq.len() - 1])?;
    let rows = response_state_positions(prompt.len(), response.len());
    let logits = net.head_taped(tape, vars, hidden, &rows)?;
    let logp = tape.log_softmax_rows(logits);
    let ids: Vec<usize> = response.iter().map(|&a| a as usize).collect();
    tape.gather(logp, &ids)
}

/// The trainable policy: next-token distributions over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    net: Transformer,
}

impl PolicyModel {
    pub fn new(net: Transformer) -> Result<Self> {
        require_head(&net, HeadKind::LmHead, "policy")?;
        Ok(Self { net })
    }

    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        Self::new(Transformer::init(config, HeadKind::LmHead, rng)?)
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Transformer {
        &mut self.net
    }

    pub fn into_net(self) -> Transformer {
        self.net
    }

    /// Logits `[T, V]` for every position of `tokens`.
    pub fn forward_logits(&self, tokens: &[Token]) -> Result<Tensor> {
        let hidden = self.net.hidden_states(tokens)?;
        let v = self.net.config().vocab_size;
        let data = hidden.iter().flat_map(|h| self.net.head_row(h)).collect();
        Tensor::new(&[tokens.len(), v], data)
    }

    /// `log pi(a_t | prompt, a_<t)` for each response token.
    pub fn sequence_log_probs(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        response_log_probs(&self.net, prompt, response)
    }

    /// Full next-token log-distributions at every response position.
    pub fn response_log_softmax(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<Vec<f64>>> {
        response_log_softmax(&self.net, prompt, response)
    }

    pub fn log_probs_taped(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        prompt: &[Token],
        response: &[Token],
    ) -> Result<Var> {
        response_log_probs_taped(&self.net, tape, vars, prompt, response)
    }

    /// Frozen deep copy of the current parameters.
    pub fn snapshot_reference(&self) -> ReferenceModel {
        ReferenceModel {
            net: frozen(&self.net),
        }
    }
}

fn frozen(net: &Transformer) -> Transformer {
    let mut copy = net.clone();
    for p in copy.params_mut() {
        p.zero_grad();
        p.set_requires_grad(false);
    }
    copy
}

/// Frozen policy the actor is measured against. Exposes no mutable access.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    net: Transformer,
}

impl ReferenceModel {
    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn snapshot(&self) -> ReferenceModel {
        self.clone()
    }

    pub fn sequence_log_probs(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        response_log_probs(&self.net, prompt, response)
    }

    pub fn response_log_softmax(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<Vec<f64>>> {
        response_log_softmax(&self.net, prompt, response)
    }

    /// A trainable policy initialized from the frozen parameters.
    pub fn to_policy(&self) -> PolicyModel {
        let params = self.net.params().iter().map(|p| p.detached().with_grad()).collect();
        PolicyModel {
            net: Transformer::from_parts(self.net.config().clone(), HeadKind::LmHead, params)
                .expect("reference layout is a policy layout"),
        }
    }
}

/// Per-token state values.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticModel {
    net: Transformer,
}

impl CriticModel {
    pub fn new(net: Transformer) -> Result<Self> {
        require_head(&net, HeadKind::ScalarHead, "critic")?;
        Ok(Self { net })
    }

    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        Self::new(Transformer::init(config, HeadKind::ScalarHead, rng)?)
    }

    /// Critic sharing a policy's backbone with a fresh zero head.
    pub fn from_policy(policy: &PolicyModel) -> Self {
        Self {
            net: policy.net().with_head(HeadKind::ScalarHead),
        }
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Transformer {
        &mut self.net
    }

    /// `V(s_t)` for the state preceding each response token.
    pub fn value_estimates(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        let seq = check_response(&self.net, prompt, response)?;
        let hidden = self.net.hidden_states(&seq[..seq.len() - 1])?;
        Ok(response_state_positions(prompt.len(), response.len())
            .into_iter()
            .map(|pos| self.net.head_row(&hidden[pos])[0])
            .collect())
    }

    /// Values `[R, 1]` recorded on `tape`.
    pub fn values_taped(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        prompt: &[Token],
        response: &[Token],
    ) -> Result<Var> {
        let seq = check_response(&self.net, prompt, response)?;
        let hidden = self.net.hidden_taped(tape, vars, &seq[..seq.len() - 1])?;
        let rows = response_state_positions(prompt.len(), response.len());
        self.net.head_taped(tape, vars, hidden, &rows)
    }
}

/// Scalar preference score for a (prompt, response) pair, read from the
/// hidden state at the final non-PAD position.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    net: Transformer,
}

impl RewardModel {
    pub fn new(net: Transformer) -> Result<Self> {
        require_head(&net, HeadKind::ScalarHead, "reward model")?;
        Ok(Self { net })
    }

    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        Self::new(Transformer::init(config, HeadKind::ScalarHead, rng)?)
    }

    pub fn from_policy(policy: &PolicyModel) -> Self {
        Self {
            net: policy.net().with_head(HeadKind::ScalarHead),
        }
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Transformer {
        &mut self.net
    }

    fn pooled_sequence(&self, prompt: &[Token], response: &[Token]) -> Result<(Vec<Token>, usize)> {
        let seq = join_sequence(prompt, response);
        self.net.check_tokens(&seq)?;
        let last = seq
            .iter()
            .rposition(|&t| t != PAD)
            .expect("sequence starts with BOS");
        Ok((seq, last))
    }

    pub fn score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        let (seq, last) = self.pooled_sequence(prompt, response)?;
        let hidden = self.net.hidden_states(&seq[..=last])?;
        Ok(self.net.head_row(&hidden[last])[0])
    }

    /// Score `[1, 1]` recorded on `tape`.
    pub fn score_taped(&self, tape: &mut Tape, vars: &[Var], prompt: &[Token], response: &[Token]) -> Result<Var> {
        let (seq, last) = self.pooled_sequence(prompt, response)?;
        let hidden = self.net.hidden_taped(tape, vars, &seq[..=last])?;
        self.net.head_taped(tape, vars, hidden, &[last])
    }
}
