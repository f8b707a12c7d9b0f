//! Teacher-forced supervised training on reference summaries. The result is
//! both the frozen reference policy and the starting point for RL.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    optimizer_step, GradientVector, HeadGrad, OptimizerKind, OptimizerState, PolicyParams,
    PolicyShape, StateInput,
};
use crate::rng::{self, Purpose};
use crate::toyenv::{log_softmax, reference_summary, Document, Token};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Documents per Adam step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-token cross-entropy over all documents before training.
    pub initial_loss: f64,
    /// Mean per-token cross-entropy over all documents after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses
            .last()
            .copied()
            .unwrap_or(self.initial_loss)
    }
}

struct Targets {
    doc: usize,
    tokens: Vec<Token>,
}

fn targets(docs: &[&Document], max_len: usize) -> Vec<Targets> {
    docs.iter()
        .enumerate()
        .map(|(doc, d)| {
            let mut tokens = reference_summary(d);
            tokens.truncate(max_len);
            Targets { doc, tokens }
        })
        .collect()
}

/// Mean teacher-forced cross-entropy and its gradient over `docs`.
pub fn teacher_forced_loss(
    params: &PolicyParams,
    docs: &[&Document],
    max_len: usize,
) -> Result<(f64, GradientVector)> {
    let targets = targets(docs, max_len);
    let mut states = Vec::new();
    let mut labels = Vec::new();
    for t in &targets {
        for i in 0..t.tokens.len() {
            states.push(StateInput {
                doc: &docs[t.doc].tokens,
                prefix: &t.tokens[..i],
            });
            labels.push(t.tokens[i] as usize);
        }
    }
    if states.is_empty() {
        return Err(Error::config("no target tokens"));
    }
    let scale = 1.0 / states.len() as f64;
    params.gradient(&states, max_len, |i, act| {
        let lp = log_softmax(&act.logits);
        let y = labels[i];
        let mut d_logits: Vec<f64> = lp.iter().map(|x| x.exp() * scale).collect();
        d_logits[y] -= scale;
        Ok(HeadGrad {
            loss: -lp[y] * scale,
            d_logits,
            d_values: vec![0.0; act.values.len()],
        })
    })
}

/// Mean per-token cross-entropy of the reference summaries.
pub fn cross_entropy(params: &PolicyParams, docs: &[&Document], max_len: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in targets(docs, max_len) {
        for i in 0..t.tokens.len() {
            let out = params.forward(&docs[t.doc].tokens, &t.tokens[..i], max_len)?;
            total -= log_softmax(&out.logits)[t.tokens[i] as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::config("no target tokens"));
    }
    Ok(total / count as f64)
}

/// Trains a freshly initialized policy to reproduce the reference summaries.
pub fn supervised_pretrain(
    docs: &[Document],
    shape: PolicyShape,
    max_len: usize,
    cfg: &PretrainConfig,
) -> Result<(PolicyParams, PretrainReport)> {
    if docs.is_empty() {
        return Err(Error::config("pretraining needs at least one document"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("pretraining batch size must be positive"));
    }
    let mut params = PolicyParams::init(shape, cfg.seed);
    let all: Vec<&Document> = docs.iter().collect();
    let initial_loss = cross_entropy(&params, &all, max_len)?;
    let mut opt = OptimizerState::new(OptimizerKind::Adam);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, Purpose::Pretrain, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Document> = chunk.iter().map(|&i| &docs[i]).collect();
            let (loss, grad) =
                teacher_forced_loss(&params, &batch, max_len).map_err(|e| match e {
                    Error::Numerical(_) => Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            optimizer_step(&mut opt, params.flat_mut(), &grad, cfg.learning_rate)?;
        }
        let loss = cross_entropy(&params, &all, max_len)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        epoch_losses.push(loss);
    }
    Ok((
        params,
        PretrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}
