use super::{slot, Token, Transformer};
use crate::error::{Error, Result};
use crate::tensor::kernels;

/// Incremental, tape-free evaluation with cached keys and values.
///
/// Feeding tokens one at a time yields the same hidden states as the taped
/// forward over the whole sequence.
#[derive(Debug, Clone)]
pub struct DecodeState<'m> {
    model: &'m Transformer,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m Transformer) -> Self {
        let layers = model.config.num_layers;
        Self {
            model,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns its final-norm hidden state.
    pub fn push(&mut self, token: Token) -> Result<Vec<f64>> {
        let m = self.model;
        let cfg = &m.config;
        if self.len >= cfg.context_length {
            return Err(Error::invalid(format!(
                "context length {} exhausted",
                cfg.context_length
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::invalid(format!(
                "token id {token} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.embed_dim;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let p = |i: usize| m.params[i].data();
        let pos = self.len;

        let mut x: Vec<f64> = p(slot::TOK)[token as usize * d..(token as usize + 1) * d]
            .iter()
            .zip(&p(slot::POS)[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();

        for l in 0..cfg.num_layers {
            let w = |o: usize| p(slot::layer(l, o));
            let a = norm_affine(&x, w(slot::LN1_G), w(slot::LN1_B));
            let q = kernels::matmul(&a, w(slot::WQ), 1, d, d);
            let k = kernels::matmul(&a, w(slot::WK), 1, d, d);
            let v = kernels::matmul(&a, w(slot::WV), 1, d, d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let steps = pos + 1;

            let mut merged = vec![0.0; d];
            let mut scores = vec![0.0; steps];
            let mut probs = vec![0.0; steps];
            for h in 0..cfg.num_heads {
                let qh = &q[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &self.keys[l][j * d + h * hd..j * d + (h + 1) * hd];
                    let mut acc = 0.0;
                    for (a, b) in qh.iter().zip(kj) {
                        if *a != 0.0 {
                            acc += a * b;
                        }
                    }
                    *s = acc * scale;
                }
                kernels::softmax_into(&scores, &mut probs);
                let out = &mut merged[h * hd..(h + 1) * hd];
                for (j, &pj) in probs.iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    let vj = &self.values[l][j * d + h * hd..j * d + (h + 1) * hd];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
            let proj = kernels::matmul(&merged, w(slot::WO), 1, d, d);
            for ((xi, pi), bi) in x.iter_mut().zip(&proj).zip(w(slot::BO)) {
                *xi += pi + bi;
            }

            let hdim = w(slot::B1).len();
            let mn = norm_affine(&x, w(slot::LN2_G), w(slot::LN2_B));
            let mut hidden = kernels::matmul(&mn, w(slot::W1), 1, d, hdim);
            for (hv, b) in hidden.iter_mut().zip(w(slot::B1)) {
                *hv = (*hv + b).max(0.0);
            }
            let out = kernels::matmul(&hidden, w(slot::W2), 1, hdim, d);
            for ((xi, oi), bi) in x.iter_mut().zip(&out).zip(w(slot::B2)) {
                *xi += oi + bi;
            }
        }
        self.len += 1;
        let (g, b, _, _) = slot::tail(cfg.num_layers);
        Ok(norm_affine(&x, p(g), p(b)))
    }
}

fn norm_affine(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm_into(x, 1e-5, &mut out);
    for ((o, g), b) in out.iter_mut().zip(gain).zip(bias) {
        *o = *o * g + b;
    }
    out
}

impl Transformer {
    /// Final-norm hidden states for every position, without a tape.
    pub fn hidden_states(&self, tokens: &[Token]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let mut state = DecodeState::new(self);
        tokens.iter().map(|&t| state.push(t)).collect()
    }

    /// Applies the head to one hidden state.
    pub fn head_row(&self, hidden: &[f64]) -> Vec<f64> {
        let (_, _, w, b) = slot::tail(self.config.num_layers);
        let out_dim = self.params[b].numel();
        let mut out = kernels::matmul(hidden, self.params[w].data(), 1, hidden.len(), out_dim);
        for (o, bias) in out.iter_mut().zip(self.params[b].data()) {
            *o += bias;
        }
        out
    }
}
