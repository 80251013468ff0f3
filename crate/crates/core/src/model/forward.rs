use super::{slot, Token, Transformer};
use crate::error::Result;
use crate::tensor::{Tape, Var};

impl Transformer {
    /// Final-norm hidden states `[T, D]` for `tokens`, recorded on `tape`.
    pub fn hidden_taped(&self, tape: &mut Tape, vars: &[Var], tokens: &[Token]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..t).collect();

        let tok = tape.index_rows(vars[slot::TOK], &ids)?;
        let pos = tape.index_rows(vars[slot::POS], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for l in 0..cfg.num_layers {
            let v = |o: usize| vars[slot::layer(l, o)];

            let a = norm_affine(tape, x, v(slot::LN1_G), v(slot::LN1_B))?;
            let q = tape.matmul(a, v(slot::WQ))?;
            let k = tape.matmul(a, v(slot::WK))?;
            let val = tape.matmul(a, v(slot::WV))?;
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let qh = tape.slice_cols(q, h * hd, hd)?;
                let kh = tape.slice_cols(k, h * hd, hd)?;
                let vh = tape.slice_cols(val, h * hd, hd)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.causal_softmax_rows(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat(&heads)?;
            let proj = tape.matmul(merged, v(slot::WO))?;
            let proj = tape.add_row(proj, v(slot::BO))?;
            x = tape.add(x, proj)?;

            let m = norm_affine(tape, x, v(slot::LN2_G), v(slot::LN2_B))?;
            let hidden = tape.matmul(m, v(slot::W1))?;
            let hidden = tape.add_row(hidden, v(slot::B1))?;
            let hidden = tape.relu(hidden);
            let out = tape.matmul(hidden, v(slot::W2))?;
            let out = tape.add_row(out, v(slot::B2))?;
            x = tape.add(x, out)?;
        }
        let (g, b, _, _) = slot::tail(cfg.num_layers);
        norm_affine(tape, x, vars[g], vars[b])
    }

    /// Head outputs `[rows, out_dim]` for selected rows of the hidden states.
    pub fn head_taped(&self, tape: &mut Tape, vars: &[Var], hidden: Var, rows: &[usize]) -> Result<Var> {
        let (_, _, w, b) = slot::tail(self.config.num_layers);
        let picked = tape.index_rows(hidden, rows)?;
        let out = tape.matmul(picked, vars[w])?;
        tape.add_row(out, vars[b])
    }
}

fn norm_affine(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x);
    let n = tape.mul_row(n, gain)?;
    tape.add_row(n, bias)
}
