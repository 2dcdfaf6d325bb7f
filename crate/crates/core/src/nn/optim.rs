use serde::{Deserialize, Serialize};

use super::params::{GradientVector, ParamVector};
use crate::error::{Error, Result};

/// `params - lr * grads`, element-wise.
pub fn sgd_step(params: &ParamVector, grads: &GradientVector, lr: f64) -> Result<ParamVector> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut ParamVector, grads: &GradientVector, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::contract(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    params.check_layout(grads.layout())?;
    for (p, g) in params.values_mut().iter_mut().zip(grads.values()) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OptimizerState {
    Sgd { lr: f64 },
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd { lr },
            OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(lr, n_params)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Sgd { .. } => OptimizerKind::Sgd,
            OptimizerState::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grads: &GradientVector) -> Result<()> {
        match self {
            OptimizerState::Sgd { lr } => sgd_step_in_place(params, grads, *lr),
            OptimizerState::Adam(state) => adam_update(state, params, grads),
        }
    }
}

/// Bias-corrected Adam update. Returns the new parameters and the advanced state.
pub fn adam_step(
    state: &OptimizerState,
    params: &ParamVector,
    grads: &GradientVector,
) -> Result<(ParamVector, OptimizerState)> {
    let OptimizerState::Adam(s) = state else {
        return Err(Error::contract("adam_step called with a non-Adam state"));
    };
    let mut s = s.clone();
    let mut p = params.clone();
    adam_update(&mut s, &mut p, grads)?;
    Ok((p, OptimizerState::Adam(s)))
}

fn adam_update(s: &mut AdamState, params: &mut ParamVector, grads: &GradientVector) -> Result<()> {
    params.check_layout(grads.layout())?;
    if s.m.len() != params.len() || s.v.len() != params.len() {
        return Err(Error::contract(
            "Adam moments do not match the parameter layout",
        ));
    }
    s.step += 1;
    let t = s.step as f64;
    let c1 = 1.0 - s.beta1.powf(t);
    let c2 = 1.0 - s.beta2.powf(t);
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .zip(s.m.iter_mut())
        .zip(s.v.iter_mut())
    {
        *m = s.beta1 * *m + (1.0 - s.beta1) * g;
        *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
    }
    Ok(())
}
