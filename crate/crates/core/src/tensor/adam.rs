use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

/// Moment estimates for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }

    /// One bias-corrected Adam update. An all-zero gradient advances the step
    /// counter and leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                &[params.len(), self.m.len()],
                &[grads.len()],
            ));
        }
        check_finite(grads)?;
        self.apply(params, grads);
        Ok(())
    }

    fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        if grads.iter().all(|&g| g == 0.0) {
            return;
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

fn check_finite(grads: &[f64]) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient element {i} is {}; update rejected",
            grads[i]
        )));
    }
    Ok(())
}

/// Adam over a fixed list of parameter tensors, reading their `grad` buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        Self {
            states: params
                .into_iter()
                .map(|p| AdamState::new(p.numel(), config))
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }

    pub fn set_lr(&mut self, lr: f64) {
        for s in &mut self.states {
            s.config.lr = lr;
        }
    }

    /// Updates every tensor from its accumulated gradient. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.states.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors but {} were given",
                self.states.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.states[i].m.len() {
                return Err(Error::shape("adam_step", p.shape(), &[self.states[i].m.len()]));
            }
            if let Some(g) = p.grad() {
                check_finite(g).map_err(|e| Error::NonFinite(format!("tensor {i}: {e}")))?;
            }
        }
        for (p, state) in params.iter_mut().zip(&mut self.states) {
            let grads = p.grad.take().unwrap_or_else(|| vec![0.0; p.numel()]);
            state.apply(p.data_mut(), &grads);
            p.grad = Some(grads);
        }
        Ok(())
    }
}
