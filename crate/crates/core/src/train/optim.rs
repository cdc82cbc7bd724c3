use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Weight decay folded into the gradient.
    Adam,
    /// Weight decay applied directly to the parameters.
    #[default]
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

fn moments_step(
    theta: &mut [f64],
    grad: impl Fn(usize, f64) -> f64,
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, th) in theta.iter_mut().enumerate() {
        let g = grad(i, *th);
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        *th -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
    }
}

fn check_lengths(theta: &[f64], grads: &[f64], state: &AdamState, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Validation("optimizer step count starts at 1".into()));
    }
    if grads.len() != theta.len() || state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::dim(format!(
            "optimizer buffers of {}, {}, {} for {} parameters",
            grads.len(),
            state.m.len(),
            state.v.len(),
            theta.len()
        )));
    }
    Ok(())
}

/// One AdamW update at step `t ≥ 1`: `θ ← θ(1 − lr·wd)` followed by the
/// bias-corrected Adam move.
pub fn adamw_step(
    theta: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    check_lengths(theta, grads, state, t)?;
    if cfg.weight_decay != 0.0 {
        let keep = 1.0 - lr * cfg.weight_decay;
        theta.iter_mut().for_each(|p| *p *= keep);
    }
    moments_step(theta, |i, _| grads[i], state, t, lr, cfg);
    Ok(())
}

/// One Adam update with L2 decay added to the gradient.
pub fn adam_step(
    theta: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    check_lengths(theta, grads, state, t)?;
    let wd = cfg.weight_decay;
    moments_step(theta, |i, p| grads[i] + wd * p, state, t, lr, cfg);
    Ok(())
}

/// Adam-family optimizer over every parameter of a store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    cfg: AdamConfig,
    states: Vec<AdamState>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, cfg: AdamConfig, store: &ParamStore) -> Self {
        let states = store.iter().map(|p| AdamState::new(p.value.len())).collect();
        Self {
            kind,
            cfg,
            states,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies `grads` (store order) with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.states.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.states.len()
            )));
        }
        self.t += 1;
        for ((p, g), state) in store.iter_mut().zip(grads).zip(&mut self.states) {
            let theta = p.value.data_mut();
            match self.kind {
                OptimizerKind::AdamW => adamw_step(theta, g, state, self.t, lr, &self.cfg)?,
                OptimizerKind::Adam => adam_step(theta, g, state, self.t, lr, &self.cfg)?,
            }
        }
        Ok(())
    }
}
