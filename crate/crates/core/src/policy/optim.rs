use serde::{Deserialize, Serialize};

use super::GradientVector;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Optimizer state carried between steps. SGD keeps no moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Applies one update in place.
///
/// SGD: `θ ← θ − lr·g`. Adam: bias-corrected first/second moments with
/// `β₁ = 0.9`, `β₂ = 0.999`, floor `1e-8`.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &GradientVector,
    lr: f64,
) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::config(format!(
            "gradient length {} does not match parameter length {}",
            grad.len(),
            params.len()
        )));
    }
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grad.as_slice()) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
            } else if state.m.len() != params.len() {
                return Err(Error::config(format!(
                    "optimizer state length {} does not match parameter length {}",
                    state.m.len(),
                    params.len()
                )));
            }
            state.step += 1;
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(grad.as_slice())
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            return Ok(());
        }
    }
    state.step += 1;
    Ok(())
}

/// Rescales `grad` to global norm `max_norm` if it is longer. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut GradientVector, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm && norm > 0.0 {
        grad.scale(max_norm / norm);
    }
    norm
}
