//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p deskrlhf-core --test acceptance -- 1 2 9`.

use deskrlhf_core::config::RunConfig;
use deskrlhf_core::io::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, to_jsonl, PromptRecord, ResponseRecord,
};
use deskrlhf_core::model::{BackboneConfig, HeadKind, PolicyModel, RewardModel, Token, Transformer, EOS};
use deskrlhf_core::oracle::OracleTask;
use deskrlhf_core::pipeline::{prepare, run_pipeline, run_ppo};
use deskrlhf_core::ppo::{
    actor_loss_taped, compute_gae, normalize_advantages, ppo_token_objective, td_residuals, IterationMetrics,
};
use deskrlhf_core::preference::{
    extract_pairs, format_percent, levels_score, rank_responses, AnnotationRecord, Category, Level, Levels,
    PairSource, PreferencePair, RankedResponseSet,
};
use deskrlhf_core::reward::{
    batch_loss_and_grad, eval_pairwise_accuracy, pairwise_loss, pairwise_loss_taped, split_held_out, train_reward,
    PairExample, RewardPreset, RewardTrainConfig,
};
use deskrlhf_core::sampling::{derive_seed, rng_for};
use deskrlhf_core::tensor::{grad_check, OpKind};
use deskrlhf_core::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut record = |n: u32, o: Outcome| {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    let single: [(u32, fn() -> Outcome); 6] = [
        (1, gradient_fidelity),
        (2, gae_exactness),
        (3, clip_semantics),
        (5, reward_model),
        (8, reward_scaling),
        (9, data_pipeline),
    ];
    for (n, f) in single {
        if on(n) {
            record(n, f());
        }
    }
    if on(4) || on(6) || on(7) {
        let (c4, c6, c7) = rlhf_runs();
        for (n, o) in [(4, c4), (6, c6), (7, c7)] {
            if on(n) {
                record(n, o);
            }
        }
    }
    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- criterion 1

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values kept at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let x = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > gap) {
                break x;
            }
        })
        .collect()
}

fn mat(r: usize, c: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(r, c, data).unwrap()
}

/// `sum(w * out)` with a fixed random weighting so every output coordinate
/// contributes a distinct amount.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

struct Fixtures {
    x: Tensor,
    other: Tensor,
    w_rc: Tensor,
    w_cr: Tensor,
    row: Tensor,
    right: Tensor,
    left: Tensor,
    w_rk: Tensor,
    w_kc: Tensor,
    w_square: Tensor,
    w_left: Tensor,
    w_concat: Tensor,
    index: Vec<usize>,
    w_gather: Tensor,
    ids: Vec<usize>,
    w_ids: Tensor,
}

type OpCase = (&'static str, Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = rng_for(seed);
    let (r, c, k) = (rng.random_range(1..5), rng.random_range(2..6), rng.random_range(1..5));
    let g = |rng: &mut ChaCha8Rng, n| uniform(rng, n, -2.0, 2.0);
    let x = mat(r, c, g(&mut rng, r * c));
    let other = mat(r, c, g(&mut rng, r * c));
    let w_rc = mat(r, c, g(&mut rng, r * c));
    let w_cr = mat(c, r, g(&mut rng, r * c));
    let row = Tensor::vector(g(&mut rng, c));
    let right = mat(c, k, g(&mut rng, c * k));
    let left = mat(k, r, g(&mut rng, k * r));
    let w_rk = mat(r, k, g(&mut rng, r * k));
    let w_kc = mat(k, c, g(&mut rng, k * c));
    let w_row = mat(1, c, g(&mut rng, c));
    let positive = mat(r, c, uniform(&mut rng, r * c, 0.2, 3.0));
    let kinked = mat(r, c, away_from(&mut rng, r * c, -2.0, 2.0, &[0.0, -0.7, 0.9], 1e-3));
    let distinct = {
        let base = away_from(&mut rng, r * c, -2.0, 2.0, &[], 0.0);
        let shifted: Vec<f64> = base
            .iter()
            .zip(other.data())
            .map(|(a, b)| if (a - b).abs() < 1e-3 { a + 0.01 } else { *a })
            .collect();
        mat(r, c, shifted)
    };
    let unique_max = {
        let mut d = g(&mut rng, r * c);
        let i = rng.random_range(0..d.len());
        d[i] = 3.0;
        mat(r, c, d)
    };
    let n = rng.random_range(2..6);
    let square = mat(n, n, g(&mut rng, n * n));
    let w_square = mat(n, n, g(&mut rng, n * n));
    let split = rng.random_range(1..c);
    let w_left = mat(r, split, g(&mut rng, r * split));
    let w_concat = mat(r, 2 * c, g(&mut rng, 2 * r * c));
    let index: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let w_gather = mat(r, 1, g(&mut rng, r)).detached();
    let w_gather = Tensor::vector(w_gather.into_data());
    let ids: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..r)).collect();
    let w_ids = mat(ids.len(), c, g(&mut rng, ids.len() * c));
    let scalar = Tensor::scalar(rng.random_range(-2.0..2.0));

    let fx = Rc::new(Fixtures {
        x: x.clone(),
        other,
        w_rc,
        w_cr,
        row: row.clone(),
        right,
        left,
        w_rk,
        w_kc,
        w_square,
        w_left,
        w_concat,
        index,
        w_gather,
        ids,
        w_ids,
    });

    macro_rules! case {
        ($fx:ident; $name:expr, $point:expr, |$t:ident, $x:ident| $body:expr) => {{
            #[allow(unused_variables)]
            let $fx = $fx.clone();
            let f: Box<dyn Fn(&mut Tape, Var) -> Result<Var>> = Box::new(move |$t: &mut Tape, $x: Var| $body);
            ($name, $point.clone(), f)
        }};
    }

    vec![
        case!(fx; "add", x, |t, v| { let o = t.constant(fx.other.clone()); let y = t.add(v, o)?; project(t, y, &fx.w_rc) }),
        case!(fx; "sub (lhs)", x, |t, v| { let o = t.constant(fx.other.clone()); let y = t.sub(v, o)?; project(t, y, &fx.w_rc) }),
        case!(fx; "sub (rhs)", x, |t, v| { let o = t.constant(fx.other.clone()); let y = t.sub(o, v)?; project(t, y, &fx.w_rc) }),
        case!(fx; "mul", x, |t, v| { let o = t.constant(fx.other.clone()); let y = t.mul(v, o)?; project(t, y, &fx.w_rc) }),
        case!(fx; "mul (scalar broadcast)", scalar, |t, v| { let o = t.constant(fx.other.clone()); let y = t.mul(o, v)?; project(t, y, &fx.w_rc) }),
        case!(fx; "minimum", distinct, |t, v| { let o = t.constant(fx.other.clone()); let y = t.minimum(v, o)?; project(t, y, &fx.w_rc) }),
        case!(fx; "maximum", distinct, |t, v| { let o = t.constant(fx.other.clone()); let y = t.maximum(o, v)?; project(t, y, &fx.w_rc) }),
        case!(fx; "matmul (lhs)", x, |t, v| { let b = t.constant(fx.right.clone()); let y = t.matmul(v, b)?; project(t, y, &fx.w_rk) }),
        case!(fx; "matmul (rhs)", x, |t, v| { let a = t.constant(fx.left.clone()); let y = t.matmul(a, v)?; project(t, y, &fx.w_kc) }),
        case!(fx; "transpose", x, |t, v| { let y = t.transpose(v)?; project(t, y, &fx.w_cr) }),
        case!(fx; "slice_cols", x, |t, v| { let y = t.slice_cols(v, 0, split)?; project(t, y, &fx.w_left) }),
        case!(fx; "concat", x, |t, v| { let o = t.constant(fx.other.clone()); let y = t.concat(&[v, o])?; let z = t.concat(&[o, v])?; let s = t.add(y, z)?; project(t, s, &fx.w_concat) }),
        case!(fx; "add_row (matrix)", x, |t, v| { let b = t.constant(fx.row.clone()); let y = t.add_row(v, b)?; project(t, y, &fx.w_rc) }),
        case!(fx; "add_row (row)", row, |t, v| { let m = t.constant(fx.x.clone()); let y = t.add_row(m, v)?; project(t, y, &fx.w_rc) }),
        case!(fx; "mul_row (matrix)", x, |t, v| { let b = t.constant(fx.row.clone()); let y = t.mul_row(v, b)?; project(t, y, &fx.w_rc) }),
        case!(fx; "mul_row (row)", row, |t, v| { let m = t.constant(fx.x.clone()); let y = t.mul_row(m, v)?; project(t, y, &fx.w_rc) }),
        case!(fx; "exp", x, |t, v| { let y = t.exp(v); project(t, y, &fx.w_rc) }),
        case!(fx; "log", positive, |t, v| { let y = t.log(v); project(t, y, &fx.w_rc) }),
        case!(fx; "relu", kinked, |t, v| { let y = t.relu(v); project(t, y, &fx.w_rc) }),
        case!(fx; "tanh", x, |t, v| { let y = t.tanh(v); project(t, y, &fx.w_rc) }),
        case!(fx; "scale", x, |t, v| { let y = t.scale(v, -1.7); project(t, y, &fx.w_rc) }),
        case!(fx; "neg", x, |t, v| { let y = t.neg(v); project(t, y, &fx.w_rc) }),
        case!(fx; "clamp", kinked, |t, v| { let y = t.clamp(v, -0.7, 0.9)?; project(t, y, &fx.w_rc) }),
        case!(fx; "softmax_rows", x, |t, v| { let y = t.softmax_rows(v); project(t, y, &fx.w_rc) }),
        case!(fx; "log_softmax_rows", x, |t, v| { let y = t.log_softmax_rows(v); project(t, y, &fx.w_rc) }),
        case!(fx; "causal_softmax_rows", square, |t, v| { let y = t.causal_softmax_rows(v)?; project(t, y, &fx.w_square) }),
        case!(fx; "layer_norm_rows", x, |t, v| { let y = t.layer_norm_rows(v); project(t, y, &fx.w_rc) }),
        case!(fx; "gather", x, |t, v| { let y = t.gather(v, &fx.index)?; project(t, y, &fx.w_gather) }),
        case!(fx; "index_rows", x, |t, v| { let y = t.index_rows(v, &fx.ids)?; project(t, y, &fx.w_ids) }),
        case!(fx; "sum", x, |t, v| { let y = t.mul(v, v)?; Ok(t.sum(y)) }),
        case!(fx; "mean", x, |t, v| { let y = t.exp(v); Ok(t.mean(y)) }),
        case!(fx; "max", unique_max, |t, v| { let y = t.mul(v, v)?; let m = t.max(v); let s = t.sum(y); t.mul(m, s) }),
        case!(fx; "pairwise hinge", w_row, |t, v| {
            let c = t.slice_cols(v, 0, 1)?;
            let r = t.slice_cols(v, 1, 1)?;
            let lo = t.sum(c);
            let hi = t.sum(r);
            pairwise_loss_taped(t, lo, hi, 5.0)
        }),
    ]
}

/// Rounding noise of a central difference is about ulp(f) / h, near 1e-11 here.
/// Parameters whose true gradient is exactly zero (a head bias that cancels
/// between chosen and rejected) would otherwise compare noise against noise.
const NOISE_FLOOR: f64 = 1e-7;

/// Largest per-coordinate relative error of `analytic` against central
/// differences of `f` over every coordinate of every parameter tensor.
fn param_fd_error<M>(
    model: &mut M,
    net: fn(&mut M) -> &mut Transformer,
    f: &dyn Fn(&M) -> f64,
    analytic: &[Vec<f64>],
) -> f64 {
    let mut worst: f64 = 0.0;
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let x0 = net(model).params()[p].data()[i];
            net(model).params_mut()[p].data_mut()[i] = x0 + H;
            let up = f(model);
            net(model).params_mut()[p].data_mut()[i] = x0 - H;
            let down = f(model);
            net(model).params_mut()[p].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * H);
            let a = grad[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + NOISE_FLOOR));
        }
    }
    worst
}

/// Central differences are only meaningful where no ReLU input lies within a
/// step of its kink; a parameter nudge of `H` moves pre-activations by a few `H`.
const KINK_GAP: f64 = 1e-4;

fn relu_margin(tape: &Tape) -> f64 {
    tape.vars()
        .filter(|&v| tape.op_kind(v) == OpKind::Relu)
        .flat_map(|v| tape.value(tape.inputs(v)[0]).data().to_vec())
        .fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

/// Runs `check` on fresh draws until one keeps every ReLU clear of its kink.
/// Returns the error and the number of rejected draws.
fn away_from_kinks(seed: u64, check: fn(u64) -> Option<f64>) -> (f64, usize) {
    (0..)
        .find_map(|attempt| check(derive_seed(seed, attempt, 0)).map(|e| (e, attempt as usize)))
        .expect("some draw avoids the kinks")
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        vocab_size: 8,
        context_length: 10,
        embed_dim: 4,
        num_layers: 1,
        num_heads: 2,
    }
}

/// Init-scale embeddings (std 0.02) give the first layer norm rows with tiny
/// spread, where its curvature grows like 1/std^3 and a step of `H` no longer
/// resolves the slope. Checks run at unit-scale embeddings and a random head.
fn condition(net: &mut Transformer, rng: &mut ChaCha8Rng) {
    let params = net.params_mut();
    for t in params.iter_mut().take(2) {
        for v in t.data_mut() {
            *v *= 25.0;
        }
    }
    let last = params.len() - 1;
    for i in [last - 1, last] {
        for v in params[i].data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<Token> {
    (0..rng.random_range(lo..=hi)).map(|_| rng.random_range(3..8)).collect()
}

fn actor_loss_error(seed: u64) -> Option<f64> {
    let mut rng = rng_for(seed);
    let mut policy = PolicyModel::init(tiny_backbone(), &mut rng).unwrap();
    condition(policy.net_mut(), &mut rng);
    let prompt = random_tokens(&mut rng, 1, 3);
    let response = random_tokens(&mut rng, 2, 5);
    let eps = 0.2;
    let lp0 = policy.sequence_log_probs(&prompt, &response).unwrap();
    // Ratios straddle both clip edges without landing within 1e-3 of them.
    let log_ratio = away_from(&mut rng, lp0.len(), -0.5, 0.5, &[(1.0f64 - eps).ln(), (1.0f64 + eps).ln()], 1e-3);
    let old: Vec<f64> = lp0.iter().zip(&log_ratio).map(|(l, d)| l - d).collect();
    let adv = away_from(&mut rng, lp0.len(), -2.0, 2.0, &[0.0], 0.05);
    let n = lp0.len() as f64;

    let mut tape = Tape::new();
    let vars = policy.net().bind(&mut tape, true);
    let lp = policy.log_probs_taped(&mut tape, &vars, &prompt, &response).unwrap();
    let (loss, _) = actor_loss_taped(&mut tape, lp, &old, &adv, eps).unwrap();
    let loss = tape.scale(loss, 1.0 / n);
    if relu_margin(&tape) < KINK_GAP {
        return None;
    }
    let grads = tape.backward(loss).unwrap();
    policy.net_mut().zero_grad();
    policy.net_mut().accumulate(&grads, &vars).unwrap();
    let analytic: Vec<Vec<f64>> = policy.net().params().iter().map(|p| p.grad().unwrap().to_vec()).collect();

    let f = |m: &PolicyModel| -> f64 {
        let lp = m.sequence_log_probs(&prompt, &response).unwrap();
        -lp.iter()
            .zip(&old)
            .zip(&adv)
            .map(|((l, o), a)| ppo_token_objective((l - o).exp(), *a, eps))
            .sum::<f64>()
            / n
    };
    Some(param_fd_error(&mut policy, PolicyModel::net_mut, &f, &analytic))
}

fn reward_loss_error(seed: u64) -> Option<f64> {
    let mut rng = rng_for(seed);
    let mut reward = RewardModel::init(tiny_backbone(), &mut rng).unwrap();
    condition(reward.net_mut(), &mut rng);
    let batch: Vec<PairExample> = (0..2)
        .map(|_| PairExample {
            prompt: random_tokens(&mut rng, 1, 3),
            chosen: random_tokens(&mut rng, 1, 4),
            rejected: random_tokens(&mut rng, 1, 4),
        })
        .collect();
    // A margin that keeps every hinge active by at least 0.5.
    let gaps: Vec<f64> = batch
        .iter()
        .map(|p| reward.score(&p.prompt, &p.chosen).unwrap() - reward.score(&p.prompt, &p.rejected).unwrap())
        .collect();
    let margin = gaps.iter().cloned().fold(0.0, f64::max) + 0.5;
    for p in &batch {
        let mut tape = Tape::new();
        let vars = reward.net().bind(&mut tape, false);
        reward.score_taped(&mut tape, &vars, &p.prompt, &p.chosen).unwrap();
        reward.score_taped(&mut tape, &vars, &p.prompt, &p.rejected).unwrap();
        if relu_margin(&tape) < KINK_GAP {
            return None;
        }
    }

    reward.net_mut().zero_grad();
    batch_loss_and_grad(&mut reward, &batch, margin).unwrap();
    let analytic: Vec<Vec<f64>> = reward.net().params().iter().map(|p| p.grad().unwrap().to_vec()).collect();
    let f = |m: &RewardModel| -> f64 {
        batch
            .iter()
            .map(|p| {
                let c = m.score(&p.prompt, &p.chosen).unwrap();
                let r = m.score(&p.prompt, &p.rejected).unwrap();
                (margin - c + r).max(0.0)
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    Some(param_fd_error(&mut reward, RewardModel::net_mut, &f, &analytic))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checks = 0usize;
    let mut redraws = 0usize;
    let mut note = |err: f64, what: String| {
        checks += 1;
        if !(err <= worst.0) {
            worst = (err, what);
        }
    };
    for seed in 0..100u64 {
        for (name, point, f) in op_cases(derive_seed(0xC1, seed, 0)) {
            let err = grad_check(f, &point, H).unwrap();
            note(err, format!("{name} seed {seed}"));
        }
        let (err, skipped) = away_from_kinks(derive_seed(0xC1, seed, 1), actor_loss_error);
        redraws += skipped;
        note(err, format!("PPO actor loss seed {seed}"));
        let (err, skipped) = away_from_kinks(derive_seed(0xC1, seed, 2), reward_loss_error);
        redraws += skipped;
        note(err, format!("pairwise reward loss seed {seed}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 <= GRAD_TOL && secs < 60.0,
        format!(
            "{checks} checks over 100 seeds, worst relative error {:.2e} ({}), \
             {redraws} model draws redrawn for a ReLU input within {KINK_GAP:e} of 0, {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}` with the residuals written out.
fn gae_double_sum(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            (0..n - t)
                .map(|l| {
                    let next = if t + l + 1 < n { values[t + l + 1] } else { 0.0 };
                    (gamma * lambda).powi(l as i32) * (rewards[t + l] + gamma * next - values[t + l])
                })
                .sum()
        })
        .collect()
}

fn gae_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_for(0xC2);
    let mut worst: f64 = 0.0;
    let mut limits_exact = true;
    let mut telescope: f64 = 0.0;
    for i in 0..1000 {
        let t = rng.random_range(1..=32);
        let rewards = uniform(&mut rng, t, -1.0, 1.0);
        let values = uniform(&mut rng, t, -1.0, 1.0);
        let gamma = if i % 10 == 0 { 1.0 } else { 1.0 - rng.random_range(0.0..1.0) };
        let lambda = loop {
            let l: f64 = rng.random_range(0.0..1.0);
            if l > 0.0 {
                break l;
            }
        };
        let deltas = td_residuals(&rewards, &values, gamma);
        let (adv, ret) = compute_gae(&deltas, &values, gamma, lambda);
        for (a, b) in adv.iter().zip(gae_double_sum(&rewards, &values, gamma, lambda)) {
            worst = worst.max((a - b).abs());
        }
        for k in 0..t {
            worst = worst.max((ret[k] - (adv[k] + values[k])).abs());
        }

        // lambda = 0: the advantage is the one-step residual, bit for bit.
        let (a0, _) = compute_gae(&deltas, &values, gamma, 0.0);
        let direct: Vec<f64> = (0..t)
            .map(|k| rewards[k] + gamma * values.get(k + 1).copied().unwrap_or(0.0) - values[k])
            .collect();
        limits_exact &= a0.iter().zip(&direct).all(|(a, d)| a.to_bits() == d.to_bits());

        // gamma = lambda = 1: the undiscounted right-to-left residual sum, and
        // returns telescope to the reward-to-go.
        let d1 = td_residuals(&rewards, &values, 1.0);
        let (a1, r1) = compute_gae(&d1, &values, 1.0, 1.0);
        let mut acc = 0.0;
        for k in (0..t).rev() {
            acc = d1[k] + acc;
            limits_exact &= a1[k].to_bits() == acc.to_bits();
            let to_go: f64 = rewards[k..].iter().sum();
            telescope = telescope.max((r1[k] - to_go).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && limits_exact && telescope <= 1e-10 && secs < 10.0,
        format!(
            "1000 instances, max |recursion - double sum| {worst:.1e}, limits bit-exact {limits_exact}, \
             reward-to-go error {telescope:.1e}, {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn clip_semantics() -> Outcome {
    let eps = 0.2;
    let hi = ppo_token_objective(1.5, 1.0, eps);
    let lo = ppo_token_objective(0.5, -1.0, eps);
    // 1 - 0.2 is one ulp below the literal 0.8 in binary64.
    let worked = hi == 1.2 && lo == -(1.0 - eps) && (lo - -0.8).abs() <= f64::EPSILON;

    let mut rng = rng_for(0xC3);
    let mut token_level = true;
    let mut batches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let mut ratios = Vec::with_capacity(n);
        let mut adv = Vec::with_capacity(n);
        let mut dead = Vec::with_capacity(n);
        for _ in 0..n {
            let a = rng.random_range(0.01..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            // Half the tokens sit in the dead zone, some a hair past the edge.
            let (rho, is_dead) = match rng.random_range(0..4) {
                0 if a > 0.0 => ((1.0 + eps) * (1.0 + rng.random_range(1e-9..2.0)), true),
                0 => ((1.0 - eps) * rng.random_range(0.01..1.0 - 1e-9), true),
                1 if a > 0.0 => ((1.0 + eps) * (1.0 + 1e-9), true),
                1 => ((1.0 - eps) * (1.0 - 1e-9), true),
                2 => (rng.random_range(1.0 - eps + 1e-6..1.0 + eps - 1e-6), false),
                // Outside the band but against the advantage: still live.
                _ if a > 0.0 => ((1.0 - eps) * rng.random_range(0.05..0.99), false),
                _ => ((1.0 + eps) * rng.random_range(1.01..3.0), false),
            };
            ratios.push(rho);
            adv.push(a);
            dead.push(is_dead);
        }
        let mut tape = Tape::new();
        let lp = tape.leaf(&Tensor::vector(ratios.iter().map(|r: &f64| r.ln()).collect()).with_grad());
        let (loss, stats) = actor_loss_taped(&mut tape, lp, &vec![0.0; n], &adv, eps).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.wrt(lp).unwrap();
        for i in 0..n {
            let rho = ratios[i].ln().exp();
            if dead[i] {
                token_level &= g[i] == 0.0;
            } else {
                token_level &= (g[i] - -(rho * adv[i])).abs() <= 1e-12 * (1.0 + (rho * adv[i]).abs());
            }
        }
        token_level &= stats.clipped >= dead.iter().filter(|d| **d).count();
        batches += 1;
    }

    // Through a policy: an all-dead-zone batch leaves every parameter
    // gradient exactly zero.
    let mut model_level = true;
    for seed in 0..20u64 {
        let mut rng = rng_for(derive_seed(0xC3, seed, 1));
        let mut policy = PolicyModel::init(tiny_backbone(), &mut rng).unwrap();
        let prompt = random_tokens(&mut rng, 1, 3);
        let response = random_tokens(&mut rng, 2, 6);
        let lp0 = policy.sequence_log_probs(&prompt, &response).unwrap();
        let adv: Vec<f64> = (0..lp0.len()).map(|i| if i % 2 == 0 { 1.3 } else { -0.7 }).collect();
        let old: Vec<f64> = lp0
            .iter()
            .zip(&adv)
            .map(|(l, a)| if *a > 0.0 { l - (1.0 + eps).ln() - 0.05 } else { l - (1.0 - eps).ln() + 0.05 })
            .collect();
        let mut tape = Tape::new();
        let vars = policy.net().bind(&mut tape, true);
        let lp = policy.log_probs_taped(&mut tape, &vars, &prompt, &response).unwrap();
        let (loss, stats) = actor_loss_taped(&mut tape, lp, &old, &adv, eps).unwrap();
        let grads = tape.backward(loss).unwrap();
        policy.net_mut().zero_grad();
        policy.net_mut().accumulate(&grads, &vars).unwrap();
        model_level &= stats.clipped == lp0.len();
        model_level &= policy
            .net()
            .params()
            .iter()
            .all(|p| p.grad().is_none_or(|g| g.iter().all(|x| *x == 0.0)));
    }
    outcome(
        worked && token_level && model_level,
        format!(
            "min(1.5,1.2)={hi}, min(-0.5,-0.8)={lo}; dead-zone gradients exactly zero on {batches} \
             adversarial batches: {token_level}; all-clipped policy batches give zero parameter gradient: {model_level}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4, 6, 7

fn sorted_config(seed: u64) -> RunConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", "sorted-sequence.json"]
        .iter()
        .collect();
    RunConfig::load(&path, &[format!("seed={seed}")]).unwrap()
}

const WINDOW: usize = 5;

/// Iterations completed when the trailing `WINDOW`-iteration mean of batch
/// oracle quality first reaches `threshold`.
fn iterations_to_threshold(history: &[IterationMetrics], threshold: f64) -> Option<usize> {
    (WINDOW..=history.len()).find(|&end| {
        history[end - WINDOW..end]
            .iter()
            .map(|m| m.oracle_quality.expect("oracle attached"))
            .sum::<f64>()
            / WINDOW as f64
            >= threshold
    })
}

fn normalization_stats() -> (bool, String) {
    let mut rng = rng_for(0xC4);
    let (mut mean_err, mut std_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let n = rng.random_range(2..512);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let offset = rng.random_range(-100.0..100.0);
        let adv: Vec<f64> = (0..n).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect();
        let z = normalize_advantages(&adv).unwrap();
        let m = z.iter().sum::<f64>() / n as f64;
        let s = (z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        mean_err = mean_err.max(m.abs());
        std_err = std_err.max((s - 1.0).abs());
    }
    (
        mean_err <= 1e-9 && std_err <= 1e-6,
        format!("1000 batches: max |mean| {mean_err:.1e}, max |std - 1| {std_err:.1e}"),
    )
}

fn rlhf_runs() -> (Outcome, Outcome, Outcome) {
    let (stats_ok, stats_detail) = normalization_stats();
    let mut reach_on = Vec::new();
    let mut reach_off = Vec::new();
    let mut gains = Vec::new();
    let mut pipeline_secs = 0.0;
    let mut kl = [[0.0; 3]; 3];
    let cap = 201usize;
    for seed in 0..3u64 {
        let config = sorted_config(seed);
        let start = Instant::now();
        let prepared = prepare(&config).unwrap();
        let (_, on) = run_ppo(&config, &prepared, |_, _| Ok(true)).unwrap();
        pipeline_secs += start.elapsed().as_secs_f64();
        let threshold = prepared.baseline_quality + 0.2;
        gains.push((prepared.baseline_quality, on.final_quality));
        reach_on.push(iterations_to_threshold(&on.history, threshold).unwrap_or(cap));

        let off_config = config.with_overrides(&["ppo.normalize_advantages=false".into()]).unwrap();
        let mut window: Vec<f64> = Vec::new();
        let (_, off) = run_ppo(&off_config, &prepared, |m, _| {
            window.push(m.oracle_quality.expect("oracle attached"));
            let tail = &window[window.len().saturating_sub(WINDOW)..];
            Ok(!(tail.len() == WINDOW && tail.iter().sum::<f64>() / WINDOW as f64 >= threshold))
        })
        .unwrap();
        reach_off.push(iterations_to_threshold(&off.history, threshold).unwrap_or(cap));

        // KL of rollouts drawn from the policy after exactly 100 updates.
        kl[seed as usize][1] = on.history[100].mean_kl;
        for (slot, beta) in [(0, "0"), (2, "0.2")] {
            let c = config
                .with_overrides(&[format!("ppo.kl_coef={beta}"), "ppo.iterations=101".into()])
                .unwrap();
            let (_, r) = run_ppo(&c, &prepared, |_, _| Ok(true)).unwrap();
            kl[seed as usize][slot] = r.history[100].mean_kl;
        }
        println!(
            "  seed {seed}: baseline {:.3} final {:.3}; iterations to threshold on {} off {}; KL@100 {:.3} {:.3} {:.3}",
            gains[seed as usize].0,
            gains[seed as usize].1,
            reach_on[seed as usize],
            reach_off[seed as usize],
            kl[seed as usize][0],
            kl[seed as usize][1],
            kl[seed as usize][2]
        );
    }
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    let (m_on, m_off) = (mean(&reach_on), mean(&reach_off));
    let c4 = outcome(
        stats_ok && m_on <= m_off,
        format!(
            "{stats_detail}; mean iterations to baseline+0.2 ({WINDOW}-iteration window) normalized {m_on:.1} \
             vs unnormalized {m_off:.1} (per seed {reach_on:?} vs {reach_off:?})"
        ),
    );
    let all_gain = gains.iter().all(|(b, f)| f - b >= 0.2);
    let c6 = outcome(
        all_gain && pipeline_secs < 600.0,
        format!(
            "quality gains {:?} over 200 iterations, pipeline time {pipeline_secs:.0}s for 3 seeds",
            gains.iter().map(|(b, f)| format!("{:.3}", f - b)).collect::<Vec<_>>()
        ),
    );
    let kl_mean: Vec<f64> = (0..3).map(|j| kl.iter().map(|row| row[j]).sum::<f64>() / 3.0).collect();
    let c7 = outcome(
        kl_mean[0] >= kl_mean[1] && kl_mean[1] >= kl_mean[2],
        format!(
            "3-seed mean per-token KL after 100 iterations: beta 0 {:.3}, 0.05 {:.3}, 0.2 {:.3}",
            kl_mean[0], kl_mean[1], kl_mean[2]
        ),
    );
    (c4, c6, c7)
}

// ---------------------------------------------------------------- criterion 5, 8

/// Oracle-ranked top-2 x bottom-2 pairs over random 5-response sets until `n` pairs exist.
fn oracle_pairs(task: &OracleTask, n: usize, seed: u64) -> Vec<PairExample> {
    let mut rng = rng_for(seed);
    let hi = task.vocab_size as Token;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        let prompt: Vec<Token> = (0..rng.random_range(2..=4)).map(|_| rng.random_range(3..hi)).collect();
        let responses: Vec<(u32, Vec<Token>)> = (0..5u32)
            .map(|j| {
                let mut r: Vec<Token> = (0..rng.random_range(4..=12)).map(|_| rng.random_range(3..hi)).collect();
                r.push(EOS);
                (j, r)
            })
            .collect();
        let (ranking, _) = task.rank(&format!("q{i}"), &prompt, &responses, 1, 0.0, 0).unwrap();
        for p in extract_pairs(&ranking, PairSource::Oracle).unwrap() {
            if out.len() < n {
                out.push(PairExample {
                    prompt: prompt.clone(),
                    chosen: responses[p.chosen_id as usize].1.clone(),
                    rejected: responses[p.rejected_id as usize].1.clone(),
                });
            }
        }
        i += 1;
    }
    out
}

fn reward_config(preset: RewardPreset) -> RewardTrainConfig {
    RewardTrainConfig {
        margin: 1.0,
        lr: 0.002,
        batch_size: 16,
        epochs: 15,
        held_out_fraction: 0.2,
        preset,
    }
}

fn reward_model() -> Outcome {
    let mut rng = rng_for(0xC5);
    let mut hinge_exact = true;
    for _ in 0..10_000 {
        let (c, r) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let margin = rng.random_range(0.0..3.0);
        let want = f64::max(0.0, margin - c + r);
        hinge_exact &= pairwise_loss(c, r, margin).to_bits() == want.to_bits();
        let mut tape = Tape::new();
        let (vc, vr) = (tape.leaf(&Tensor::scalar(c)), tape.leaf(&Tensor::scalar(r)));
        let l = pairwise_loss_taped(&mut tape, vc, vr, margin).unwrap();
        hinge_exact &= tape.value(l).item() == want;
    }

    // Quality is closeness to a unigram target concentrated on two tokens, so a
    // bag-of-tokens score separates chosen from rejected.
    let mut target = vec![0.0; 13];
    target[0] = 0.5;
    target[1] = 0.5;
    let task = OracleTask::target_unigram(16, target);
    let start = Instant::now();
    let train = oracle_pairs(&task, 500, 0xC5);
    let held = oracle_pairs(&task, 200, 0xC5 + 1);
    let config = reward_config(RewardPreset::Small);
    let mut model = RewardModel::init(config.preset.backbone(16, 32), &mut rng_for(5)).unwrap();
    let zero_head_acc = eval_pairwise_accuracy(&model, &held).unwrap();
    let stats = train_reward(&mut model, &train, &held, &config, 5).unwrap();
    let acc = stats.last().unwrap().held_out_accuracy.unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        hinge_exact && acc >= 0.95 && secs < 120.0 && zero_head_acc == 0.5,
        format!(
            "hinge bit-exact on 10000 draws: {hinge_exact}; 500 target-unigram pairs -> held-out accuracy \
             {acc:.3} in {secs:.1}s; untrained zero-head accuracy {zero_head_acc}"
        ),
    )
}

fn reward_scaling() -> Outcome {
    let task = OracleTask::keyword_coverage(16, vec![vec![3], vec![7], vec![4, 5], vec![9, 10], vec![12, 13, 14]]);
    let mut acc = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let pairs = oracle_pairs(&task, 500, derive_seed(0xC8, seed, 0));
        let (train, held) = split_held_out(&pairs, 0.2, seed);
        for (slot, preset) in [RewardPreset::Small, RewardPreset::Large].into_iter().enumerate() {
            let config = reward_config(preset);
            let mut model =
                RewardModel::init(preset.backbone(16, 32), &mut rng_for(derive_seed(0xC8, seed, 1))).unwrap();
            let stats = train_reward(&mut model, &train, &held, &config, seed).unwrap();
            acc[slot].push(stats.last().unwrap().held_out_accuracy.unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (small, large) = (mean(&acc[0]), mean(&acc[1]));
    outcome(
        large >= small - 0.02,
        format!(
            "keyword-coverage held-out accuracy, 5-seed means: large {large:.3} vs small {small:.3} \
             (large {:?}, small {:?})",
            acc[1], acc[0]
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn record_with(levels: &[(Category, Level)]) -> Levels {
    let mut l = Levels::uniform(Level::Positive);
    for (c, v) in levels {
        l.set(*c, *v);
    }
    l
}

fn tiny_pipeline_config(seed: u64) -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            r#"actor={"vocab_size":16,"context_length":20,"embed_dim":8,"num_layers":1,"num_heads":2}"#.into(),
            "prompts.count=12".into(),
            "prompts.eval_count=3".into(),
            "generation.max_response_tokens=6".into(),
            "ppo.max_response_tokens=6".into(),
            "ppo.iterations=3".into(),
            "ppo.rollout_batch_size=4".into(),
            "warm_start.epochs=1".into(),
            "warm_start.demo_max_len=6".into(),
            "reward.epochs=2".into(),
            format!("seed={seed}"),
        ])
        .unwrap()
}

fn data_pipeline() -> Outcome {
    let mut rng = rng_for(0xC9);
    let mut pairs_ok = true;
    let mut sets = Vec::new();
    for i in 0..1000 {
        let mut scores: Vec<f64> = Vec::new();
        while scores.len() < 5 {
            let s = rng.random_range(0..146) as f64;
            if !scores.contains(&s) {
                scores.push(s);
            }
        }
        let scored: Vec<(u32, f64)> = scores.iter().enumerate().map(|(j, s)| (j as u32, *s)).collect();
        let ranking = rank_responses(&format!("p{i}"), &scored).unwrap();
        pairs_ok &= extract_pairs(&ranking, PairSource::Oracle).unwrap().len() == 4;
        sets.push(ranking);
    }

    let full = levels_score(&Levels::uniform(Level::Positive)).unwrap();
    let none = levels_score(&Levels::uniform(Level::Negative)).unwrap();
    let partial = levels_score(&record_with(&[(Category::Clarity, Level::Neutral)])).unwrap();
    let fixtures = full.score == 145.0
        && full.percentage == 100.0
        && none.score == 0.0
        && none.percentage == 0.0
        && partial.score == 127.0
        && format!("{:.3}", partial.percentage) == "87.586"
        && format_percent(partial.percentage) == "87.6%";

    let responses: Vec<ResponseRecord> = (0..50)
        .map(|i| ResponseRecord {
            prompt_id: format!("p{:05}", i / 5),
            response_id: i % 5,
            tokens: random_tokens(&mut rng, 1, 12),
            seed: rng.random(),
        })
        .collect();
    let prompts = vec![
        PromptRecord::from_tokens("p00000", vec![3, 4, 5]),
        PromptRecord::from_text("t", "Plan a trip to the coast."),
    ];
    let annotations: Vec<AnnotationRecord> = (0..20)
        .map(|i| AnnotationRecord {
            prompt_id: "p00000".into(),
            response_id: i % 5,
            annotator: format!("a{}", i / 5),
            levels: record_with(&[(Category::ALL[i as usize % 8], Level::Neutral)]),
            timestamp: Some(1_767_225_600_000 + i as u64 * 1000),
        })
        .collect();
    let pairs: Vec<PreferencePair> = sets
        .iter()
        .take(50)
        .flat_map(|s| extract_pairs(s, PairSource::Human).unwrap())
        .collect();
    fn round_trip<T: serde::Serialize + serde::de::DeserializeOwned + PartialEq>(items: &[T]) -> bool {
        let text = to_jsonl(items).unwrap();
        let back: Vec<T> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        back == items && to_jsonl(&back).unwrap() == text
    }
    let jsonl = round_trip(&responses)
        && round_trip(&prompts)
        && round_trip(&annotations)
        && round_trip(&pairs)
        && round_trip::<RankedResponseSet>(&sets[..50]);

    let dir = tempfile::tempdir().unwrap();
    let mut checkpoints = true;
    for (i, head) in [HeadKind::LmHead, HeadKind::ScalarHead].into_iter().enumerate() {
        let model = Transformer::init(BackboneConfig::default(), head, &mut rng_for(i as u64)).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let path = dir.path().join(format!("m{i}.ckpt"));
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        checkpoints &= std::fs::read(&path).unwrap() == bytes
            && loaded == model
            && decode_checkpoint(&bytes).unwrap() == model
            && encode_checkpoint(&loaded).unwrap() == bytes;
    }

    let run = |seed| {
        let (models, report) = run_pipeline(&tiny_pipeline_config(seed), |_, _| Ok(true)).unwrap();
        let bits: Vec<u64> = report
            .history
            .iter()
            .flat_map(|m| [m.mean_reward, m.mean_kl, m.actor_loss, m.critic_loss])
            .chain([report.final_quality, report.baseline_quality])
            .map(f64::to_bits)
            .collect();
        (
            encode_checkpoint(models.actor.net()).unwrap(),
            encode_checkpoint(models.critic.net()).unwrap(),
            encode_checkpoint(models.reward.net()).unwrap(),
            bits,
        )
    };
    let (a, b, c) = (run(3), run(3), run(4));
    let reproducible = a == b && a.0 != c.0;

    outcome(
        pairs_ok && fixtures && jsonl && checkpoints && reproducible,
        format!(
            "4 pairs from each of 1000 5-response rankings: {pairs_ok}; rubric fixtures 145/0/127 -> \
             {}/{}/{:.3}%: {fixtures}; JSONL round trips: {jsonl}; checkpoint round trips: {checkpoints}; \
             same-seed pipeline bit-identical: {reproducible}",
            format_percent(full.percentage),
            format_percent(none.percentage),
            partial.percentage
        ),
    )
}
