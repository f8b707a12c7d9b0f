//! Multi-dimensional reward aggregation.
//!
//! Four ways to turn per-dimension rewards into one parameter update per
//! rollout batch:
//!
//! | strategy | reward | loss | gradient |
//! |----------|--------|------|----------|
//! | `min`    | each episode's lowest dimension | one, on that dimension's value channel | one |
//! | `sum-r`  | sum of dimensions | one, on the summed value channels | one |
//! | `sum-l`  | per dimension | sum of the per-dimension losses | one |
//! | `pro`    | per dimension | one per dimension | one per dimension, conflict-projected, summed |
//!
//! Every strategy clips the combined gradient to the configured global norm
//! and runs `ppo_epochs` optimizer steps against the same batch.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::policy::GradientVector;
use crate::policy::{clip_grad_norm, optimizer_step, OptimizerState, PolicyParams};
use crate::ppo::{
    loss_and_gradient, loss_targets, ChannelSelector, Hyperparams, LossBreakdown, LossTargets,
    RolloutBatch,
};
use crate::rewards::{DimScores, Dimension};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Projectors with squared norm below this are skipped.
pub const MIN_PROJECTOR_NORM_SQ: f64 = 1e-24;
/// A projected gradient shorter than this fraction of its pre-projection
/// length is treated as exactly cancelled.
pub const CANCELLATION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "min")]
    Min,
    #[serde(rename = "pro")]
    Pro,
    #[serde(rename = "sum-r")]
    SumR,
    #[serde(rename = "sum-l")]
    SumL,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Min, Strategy::Pro, Strategy::SumR, Strategy::SumL];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Min => "min",
            Strategy::Pro => "pro",
            Strategy::SumR => "sum-r",
            Strategy::SumL => "sum-l",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy {s:?}; expected min, pro, sum-r or sum-l"
                ))
            })
    }
}

/// Lowest score in fixed dimension order; ties go to the earlier dimension.
pub fn select_min_dimension(scores: &DimScores) -> (Dimension, f64) {
    let (i, v) = argmin(&scores.to_array());
    (Dimension::ALL[i], v)
}

/// Index and value of the first minimum.
pub fn argmin(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// One processed `(task, against)` pair, recorded right after it was handled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionStep {
    pub task: usize,
    pub against: usize,
    pub projected: bool,
    /// `g_task^PC · g_against` after handling the pair.
    pub dot_after: f64,
    pub norm_task: f64,
    pub norm_against: f64,
}

/// Conflict projection: for each task, visit every other task in shuffled
/// order and remove the component along that task's original gradient
/// whenever the two point against each other. Returns the sum of the
/// projected gradients.
pub fn pcgrad_project<R: Rng + ?Sized>(
    grads: &[GradientVector],
    rng: &mut R,
) -> Result<GradientVector> {
    pcgrad_project_traced(grads, rng).map(|(g, _)| g)
}

pub fn pcgrad_project_traced<R: Rng + ?Sized>(
    grads: &[GradientVector],
    rng: &mut R,
) -> Result<(GradientVector, Vec<ProjectionStep>)> {
    let first = grads
        .first()
        .ok_or_else(|| Error::config("projection needs at least one gradient"))?;
    let n = first.len();
    if let Some(g) = grads.iter().find(|g| g.len() != n) {
        return Err(Error::config(format!(
            "gradient lengths differ: {} vs {n}",
            g.len()
        )));
    }
    let norms_sq: Vec<f64> = grads.iter().map(GradientVector::norm_sq).collect();
    let mut trace = Vec::new();
    let mut total = GradientVector::zeros(n);
    for (p, g_p) in grads.iter().enumerate() {
        let mut pc = g_p.clone();
        let mut others: Vec<usize> = (0..grads.len()).filter(|&q| q != p).collect();
        others.shuffle(rng);
        for q in others {
            if norms_sq[q] < MIN_PROJECTOR_NORM_SQ {
                continue;
            }
            let dot = pc.dot(&grads[q]);
            let projected = dot < 0.0;
            if projected {
                let before = pc.norm();
                pc.axpy(-dot / norms_sq[q], &grads[q]);
                // Second pass removes what rounding left along g_q.
                let residual = pc.dot(&grads[q]);
                if residual < 0.0 {
                    pc.axpy(-residual / norms_sq[q], &grads[q]);
                }
                // Nearly collinear inputs cancel down to pure rounding noise.
                if pc.norm() <= CANCELLATION_FLOOR * before {
                    pc = GradientVector::zeros(n);
                }
            }
            trace.push(ProjectionStep {
                task: p,
                against: q,
                projected,
                dot_after: pc.dot(&grads[q]),
                norm_task: pc.norm(),
                norm_against: norms_sq[q].sqrt(),
            });
        }
        total += &pc;
    }
    Ok((total, trace))
}

/// What one call to [`mdo_update`] did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Loss before each inner step, averaged over the inner epochs.
    pub loss: LossBreakdown,
    /// Pre-clip norm of the combined gradient, averaged over the inner epochs.
    pub grad_norm: f64,
    /// Projections actually applied (Pro only).
    pub projections: usize,
    /// Selected dimension per trajectory (Min only).
    pub selected: Vec<usize>,
}

/// The per-strategy loss targets for a batch.
pub fn strategy_targets(
    strategy: Strategy,
    batch: &RolloutBatch,
    hp: &Hyperparams,
) -> Result<(Vec<LossTargets>, Vec<usize>)> {
    let m = batch.channels();
    match strategy {
        Strategy::Min => {
            let picks: Vec<usize> = batch
                .trajectories
                .iter()
                .map(|t| argmin(&t.dim_rewards).0)
                .collect();
            Ok((
                vec![loss_targets(
                    batch,
                    &ChannelSelector::PerTrajectory(picks.clone()),
                    hp,
                )?],
                picks,
            ))
        }
        Strategy::SumR => Ok((
            vec![loss_targets(batch, &ChannelSelector::Summed, hp)?],
            Vec::new(),
        )),
        Strategy::SumL | Strategy::Pro => Ok((
            (0..m)
                .map(|k| loss_targets(batch, &ChannelSelector::Channel(k), hp))
                .collect::<Result<_>>()?,
            Vec::new(),
        )),
    }
}

/// Combines per-task gradients the way `strategy` prescribes: projection
/// for Pro, a plain sum otherwise.
pub fn combine_gradients<R: Rng + ?Sized>(
    strategy: Strategy,
    grads: &[GradientVector],
    rng: &mut R,
) -> Result<(GradientVector, usize)> {
    match strategy {
        Strategy::Pro => {
            let (g, trace) = pcgrad_project_traced(grads, rng)?;
            Ok((g, trace.iter().filter(|s| s.projected).count()))
        }
        _ => {
            let first = grads
                .first()
                .ok_or_else(|| Error::config("no gradients to combine"))?;
            let mut total = GradientVector::zeros(first.len());
            for g in grads {
                total += g;
            }
            Ok((total, 0))
        }
    }
}

/// Runs `hp.ppo_epochs` updates of `params` on `batch`.
///
/// `seed` and `iteration` key the projection shuffle stream.
#[allow(clippy::too_many_arguments)]
pub fn mdo_update(
    strategy: Strategy,
    batch: &RolloutBatch,
    params: &mut PolicyParams,
    hp: &Hyperparams,
    optimizer: &mut OptimizerState,
    max_summary_len: usize,
    seed: u64,
    iteration: u64,
) -> Result<StepMetrics> {
    hp.validate()?;
    if batch.channels() != params.shape().channels {
        return Err(Error::config(format!(
            "batch has {} reward channels but the value head has {}",
            batch.channels(),
            params.shape().channels
        )));
    }
    let (targets, selected) = strategy_targets(strategy, batch, hp)?;
    let mut rng = rng::stream(seed, Purpose::Projection, iteration);
    let mut metrics = StepMetrics {
        selected,
        ..Default::default()
    };

    for _ in 0..hp.ppo_epochs {
        let (loss, grads) = match strategy {
            Strategy::Pro => {
                let parts: Vec<Result<(LossBreakdown, GradientVector)>> = targets
                    .par_iter()
                    .map(|tg| loss_and_gradient(batch, params, hp, &[tg], max_summary_len))
                    .collect();
                let mut loss = LossBreakdown::default();
                let mut grads = Vec::with_capacity(parts.len());
                for part in parts {
                    let (l, g) = part?;
                    loss = loss + l;
                    grads.push(g);
                }
                (loss, grads)
            }
            _ => {
                let refs: Vec<&LossTargets> = targets.iter().collect();
                let (l, g) = loss_and_gradient(batch, params, hp, &refs, max_summary_len)?;
                (l, vec![g])
            }
        };
        let (mut grad, projections) = combine_gradients(strategy, &grads, &mut rng)?;
        metrics.grad_norm += clip_grad_norm(&mut grad, hp.max_grad_norm);
        metrics.projections += projections;
        metrics.loss = metrics.loss + loss;
        optimizer_step(optimizer, params.flat_mut(), &grad, hp.learning_rate)?;
    }
    let inv = 1.0 / hp.ppo_epochs as f64;
    metrics.loss = metrics.loss.scaled(inv);
    metrics.grad_norm *= inv;
    if params.flat().iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("parameters became non-finite"));
    }
    Ok(metrics)
}
