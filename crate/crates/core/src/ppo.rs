//! PPO machinery: KL-shaped per-token rewards, GAE, and the
//! clipped-surrogate / value / entropy loss over a batch of trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{GradientVector, HeadGrad, PolicyParams, StateInput};
use crate::rewards::{DimScores, RewardModel};
use crate::rng::{self, Purpose};
use crate::toyenv::{content, log_softmax, rollout, Document, Episode, EpisodeConfig, Token};
use crate::{Error, Result};

/// Largest tolerated `|log π_new − log π_old|` before the ratio is declared
/// non-finite.
pub const MAX_LOG_RATIO: f64 = 40.0;
/// Advantage normalization is skipped below this batch variance.
pub const MIN_NORMALIZE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_beta: f64,
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub ppo_epochs: usize,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.9,
            gae_lambda: 0.95,
            kl_beta: 0.2,
            clip_epsilon: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 1.41e-4,
            ppo_epochs: 4,
            batch_size: 4,
            max_grad_norm: 1.0,
            normalize_advantages: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (
                self.gamma > 0.0 && self.gamma <= 1.0,
                "gamma must lie in (0, 1]",
            ),
            (
                (0.0..=1.0).contains(&self.gae_lambda),
                "gae_lambda must lie in [0, 1]",
            ),
            (self.kl_beta >= 0.0, "kl_beta must be non-negative"),
            (self.clip_epsilon > 0.0, "clip_epsilon must be positive"),
            (self.value_coef >= 0.0, "value_coef must be non-negative"),
            (
                self.entropy_coef >= 0.0,
                "entropy_coef must be non-negative",
            ),
            (self.learning_rate > 0.0, "learning_rate must be positive"),
            (self.ppo_epochs >= 1, "ppo_epochs must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.max_grad_norm > 0.0, "max_grad_norm must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }
}

/// One scored, advantaged episode. Per-step matrices are `[L][M]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub doc_id: usize,
    pub doc: Document,
    pub tokens: Vec<Token>,
    pub logprobs_rl: Vec<f64>,
    pub logprobs_ft: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// Raw terminal reward per channel.
    pub dim_rewards: Vec<f64>,
    /// `−β·(log π_RL − log π_FT)` for the chosen token at each step.
    pub kl_rewards: Vec<f64>,
    pub shaped_rewards: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
    pub truncated: bool,
}

impl Trajectory {
    /// Scores are attached as terminal rewards; shaping and GAE run per channel.
    pub fn from_episode(
        doc_id: usize,
        doc: Document,
        episode: Episode,
        dim_rewards: Vec<f64>,
        hp: &Hyperparams,
    ) -> Result<Self> {
        let channels = dim_rewards.len();
        if episode.values.iter().any(|v| v.len() != channels) {
            return Err(Error::config(format!(
                "value head has a different channel count than the {channels} rewards"
            )));
        }
        let kl_rewards = kl_penalties(&episode.logprobs_rl, &episode.logprobs_ft, hp.kl_beta)?;
        let shaped_rewards = shape_rewards(
            &episode.logprobs_rl,
            &episode.logprobs_ft,
            hp.kl_beta,
            &dim_rewards,
        )?;
        let len = episode.tokens.len();
        let mut advantages = vec![vec![0.0; channels]; len];
        let mut returns = vec![vec![0.0; channels]; len];
        for k in 0..channels {
            let r: Vec<f64> = shaped_rewards.iter().map(|row| row[k]).collect();
            let v: Vec<f64> = episode.values.iter().map(|row| row[k]).collect();
            let (adv, ret) = compute_gae(&r, &v, hp.gamma, hp.gae_lambda)?;
            for t in 0..len {
                advantages[t][k] = adv[t];
                returns[t][k] = ret[t];
            }
        }
        Ok(Trajectory {
            doc_id,
            doc,
            tokens: episode.tokens,
            logprobs_rl: episode.logprobs_rl,
            logprobs_ft: episode.logprobs_ft,
            values: episode.values,
            dim_rewards,
            kl_rewards,
            shaped_rewards,
            advantages,
            returns,
            truncated: episode.truncated,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.dim_rewards.len()
    }

    pub fn summary(&self) -> &[Token] {
        content(&self.tokens)
    }

    /// The four quality scores, when this trajectory carries exactly four channels.
    pub fn dim_scores(&self) -> Option<DimScores> {
        match self.dim_rewards[..] {
            [a, b, c, d] => Some(DimScores::new(a, b, c, d)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    /// Behaviour-policy log-probs, frozen before any update in this iteration.
    pub old_logprobs: Vec<Vec<f64>>,
}

impl RolloutBatch {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        let old_logprobs = trajectories.iter().map(|t| t.logprobs_rl.clone()).collect();
        RolloutBatch {
            trajectories,
            old_logprobs,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn channels(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::channels)
    }
}

/// Per-step `−β·(log π_RL(a_t) − log π_FT(a_t))`.
pub fn kl_penalties(logprobs_rl: &[f64], logprobs_ft: &[f64], beta: f64) -> Result<Vec<f64>> {
    if logprobs_rl.len() != logprobs_ft.len() {
        return Err(Error::config(format!(
            "log-prob streams differ in length: {} vs {}",
            logprobs_rl.len(),
            logprobs_ft.len()
        )));
    }
    Ok(logprobs_rl
        .iter()
        .zip(logprobs_ft)
        .map(|(rl, ft)| -beta * (rl - ft))
        .collect())
}

/// `[L][M]` reward matrix: the shared KL penalty at every step, plus the
/// per-channel terminal reward on the last step.
pub fn shape_rewards(
    logprobs_rl: &[f64],
    logprobs_ft: &[f64],
    beta: f64,
    terminal_reward: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let kl = kl_penalties(logprobs_rl, logprobs_ft, beta)?;
    let last = kl
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::config("empty episode"))?;
    Ok(kl
        .iter()
        .enumerate()
        .map(|(t, &k)| {
            terminal_reward
                .iter()
                .map(|&r| if t == last { k + r } else { k })
                .collect()
        })
        .collect())
}

/// Backward GAE recursion with `V(s_L) = 0`. Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::config(format!(
            "rewards ({}) and values ({}) differ in length",
            rewards.len(),
            values.len()
        )));
    }
    if rewards.is_empty() {
        return Err(Error::config("GAE needs at least one step"));
    }
    let len = rewards.len();
    let mut adv = vec![0.0; len];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..len).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shifts and scales in place to zero mean and unit variance, pooled over
/// all sequences. Skipped when the variance is below
/// [`MIN_NORMALIZE_VARIANCE`]. Returns whether it was applied.
pub fn normalize_advantages(adv: &mut [Vec<f64>]) -> bool {
    let n: usize = adv.iter().map(Vec::len).sum();
    if n == 0 {
        return false;
    }
    let mean = adv.iter().flatten().sum::<f64>() / n as f64;
    let var = adv
        .iter()
        .flatten()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n as f64;
    if var < MIN_NORMALIZE_VARIANCE {
        return false;
    }
    let std = var.sqrt();
    adv.iter_mut()
        .flatten()
        .for_each(|a| *a = (*a - mean) / std);
    true
}

/// Which value channels a loss regresses, and against which advantage stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelSelector {
    /// The same channel for every trajectory.
    Channel(usize),
    /// One channel per trajectory.
    PerTrajectory(Vec<usize>),
    /// The sum of all channels, regressed on the summed terminal reward.
    Summed,
}

/// Advantages, return targets, and value-channel weights for one loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
    /// The value prediction for trajectory `i` is `weights[i] · values`.
    pub weights: Vec<Vec<f64>>,
}

pub fn loss_targets(
    batch: &RolloutBatch,
    selector: &ChannelSelector,
    hp: &Hyperparams,
) -> Result<LossTargets> {
    let m = batch.channels();
    let n = batch.trajectories.len();
    let one_hot = |k: usize| -> Result<Vec<f64>> {
        if k >= m {
            return Err(Error::config(format!(
                "channel {k} out of range for {m} channels"
            )));
        }
        let mut w = vec![0.0; m];
        w[k] = 1.0;
        Ok(w)
    };
    let column = |rows: &[Vec<f64>], k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();

    let mut targets = LossTargets {
        advantages: Vec::with_capacity(n),
        returns: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
    };
    match selector {
        ChannelSelector::Channel(_) | ChannelSelector::PerTrajectory(_) => {
            if let ChannelSelector::PerTrajectory(ks) = selector {
                if ks.len() != n {
                    return Err(Error::config(format!(
                        "{} channel picks for {n} trajectories",
                        ks.len()
                    )));
                }
            }
            for (i, traj) in batch.trajectories.iter().enumerate() {
                let k = match selector {
                    ChannelSelector::Channel(k) => *k,
                    ChannelSelector::PerTrajectory(ks) => ks[i],
                    ChannelSelector::Summed => unreachable!(),
                };
                targets.weights.push(one_hot(k)?);
                targets.advantages.push(column(&traj.advantages, k));
                targets.returns.push(column(&traj.returns, k));
            }
        }
        ChannelSelector::Summed => {
            for traj in &batch.trajectories {
                let total: f64 = traj.dim_rewards.iter().fold(0.0, |acc, r| acc + r);
                let last = traj.len() - 1;
                let rewards: Vec<f64> = traj
                    .kl_rewards
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| if t == last { k + total } else { k })
                    .collect();
                let values: Vec<f64> = traj
                    .values
                    .iter()
                    .map(|v| v.iter().fold(0.0, |a, x| a + x))
                    .collect();
                let (adv, ret) = compute_gae(&rewards, &values, hp.gamma, hp.gae_lambda)?;
                targets.weights.push(vec![1.0; m]);
                targets.advantages.push(adv);
                targets.returns.push(ret);
            }
        }
    }
    if hp.normalize_advantages {
        normalize_advantages(&mut targets.advantages);
    }
    Ok(targets)
}

/// Minimization-form PPO loss: `total = −clip + c1·value − c2·entropy`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
}

impl std::ops::Add for LossBreakdown {
    type Output = LossBreakdown;

    fn add(self, o: LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            clip_loss: self.clip_loss + o.clip_loss,
            value_loss: self.value_loss + o.value_loss,
            entropy: self.entropy + o.entropy,
            total: self.total + o.total,
        }
    }
}

impl LossBreakdown {
    pub fn scaled(self, s: f64) -> LossBreakdown {
        LossBreakdown {
            clip_loss: self.clip_loss * s,
            value_loss: self.value_loss * s,
            entropy: self.entropy * s,
            total: self.total * s,
        }
    }
}

/// `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)` and its derivative with respect to `log π_new`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// Categorical entropy of `softmax(logits)` and its gradient in logit space.
pub fn entropy_and_grad(logp: &[f64]) -> (f64, Vec<f64>) {
    let h = -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
    let grad = logp.iter().map(|lp| -lp.exp() * (lp + h)).collect();
    (h, grad)
}

struct StepRef {
    traj: usize,
    step: usize,
}

fn step_refs(batch: &RolloutBatch) -> Vec<StepRef> {
    batch
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(traj, t)| (0..t.len()).map(move |step| StepRef { traj, step }))
        .collect()
}

/// Loss terms at one state, summed over `targets`, with the derivative with
/// respect to that state's logits and values. Every term is pre-divided by
/// the batch step count.
fn state_loss(
    batch: &RolloutBatch,
    at: &StepRef,
    logits: &[f64],
    values: &[f64],
    hp: &Hyperparams,
    targets: &[&LossTargets],
    inv_n: f64,
) -> Result<(LossBreakdown, HeadGrad)> {
    let traj = &batch.trajectories[at.traj];
    let action = traj.tokens[at.step] as usize;
    let logp = log_softmax(logits);
    let log_ratio = logp[action] - batch.old_logprobs[at.traj][at.step];
    if !log_ratio.is_finite() || log_ratio.abs() > MAX_LOG_RATIO {
        return Err(Error::numerical(format!(
            "non-finite probability ratio in trajectory {} (doc {}), step {}: log-ratio {log_ratio}",
            at.traj, traj.doc_id, at.step
        )));
    }
    let ratio = log_ratio.exp();
    let (entropy, d_entropy) = entropy_and_grad(&logp);

    let mut terms = LossBreakdown::default();
    let mut d_logp_action = 0.0;
    let mut d_logits = vec![0.0; logits.len()];
    let mut d_values = vec![0.0; values.len()];
    for tg in targets {
        let adv = tg.advantages[at.traj][at.step];
        let ret = tg.returns[at.traj][at.step];
        let w = &tg.weights[at.traj];
        let (surrogate, d_surrogate) = clipped_surrogate(ratio, adv, hp.clip_epsilon);
        let pred: f64 = w.iter().zip(values).map(|(a, b)| a * b).sum();
        let err = pred - ret;

        let clip = surrogate * inv_n;
        let value = err * err * inv_n;
        let ent = entropy * inv_n;
        terms = terms
            + LossBreakdown {
                clip_loss: clip,
                value_loss: value,
                entropy: ent,
                total: -clip + hp.value_coef * value - hp.entropy_coef * ent,
            };

        d_logp_action -= d_surrogate * inv_n;
        for (dz, de) in d_logits.iter_mut().zip(&d_entropy) {
            *dz -= hp.entropy_coef * de * inv_n;
        }
        for (dv, wk) in d_values.iter_mut().zip(w) {
            *dv += hp.value_coef * 2.0 * err * wk * inv_n;
        }
    }
    // d log π(a) / d z = onehot(a) − π
    for (j, (dz, lp)) in d_logits.iter_mut().zip(&logp).enumerate() {
        let indicator = if j == action { 1.0 } else { 0.0 };
        *dz += d_logp_action * (indicator - lp.exp());
    }
    Ok((
        terms,
        HeadGrad {
            loss: terms.total,
            d_logits,
            d_values,
        },
    ))
}

fn check_targets(batch: &RolloutBatch, targets: &[&LossTargets]) -> Result<()> {
    if batch.num_steps() == 0 {
        return Err(Error::config("empty rollout batch"));
    }
    for tg in targets {
        let shapes_match =
            tg.advantages.len() == batch.trajectories.len()
                && tg.returns.len() == batch.trajectories.len()
                && batch.trajectories.iter().enumerate().all(|(i, t)| {
                    tg.advantages[i].len() == t.len() && tg.returns[i].len() == t.len()
                });
        if !shapes_match {
            return Err(Error::config("loss targets do not match the rollout batch"));
        }
    }
    Ok(())
}

/// Forward-only evaluation of the summed losses for `targets`.
pub fn evaluate_loss(
    batch: &RolloutBatch,
    params: &PolicyParams,
    hp: &Hyperparams,
    targets: &[&LossTargets],
    max_summary_len: usize,
) -> Result<LossBreakdown> {
    check_targets(batch, targets)?;
    let steps = step_refs(batch);
    let inv_n = 1.0 / steps.len() as f64;
    let parts: Vec<Result<LossBreakdown>> = steps
        .par_iter()
        .map(|at| {
            let traj = &batch.trajectories[at.traj];
            let act = params.forward(&traj.doc.tokens, &traj.tokens[..at.step], max_summary_len)?;
            state_loss(batch, at, &act.logits, &act.values, hp, targets, inv_n).map(|(l, _)| l)
        })
        .collect();
    parts
        .into_iter()
        .try_fold(LossBreakdown::default(), |acc, p| Ok(acc + p?))
}

/// Summed losses for `targets` and their exact gradient.
pub fn loss_and_gradient(
    batch: &RolloutBatch,
    params: &PolicyParams,
    hp: &Hyperparams,
    targets: &[&LossTargets],
    max_summary_len: usize,
) -> Result<(LossBreakdown, GradientVector)> {
    check_targets(batch, targets)?;
    let steps = step_refs(batch);
    let inv_n = 1.0 / steps.len() as f64;
    let states: Vec<StateInput<'_>> = steps
        .iter()
        .map(|at| {
            let traj = &batch.trajectories[at.traj];
            StateInput {
                doc: &traj.doc.tokens,
                prefix: &traj.tokens[..at.step],
            }
        })
        .collect();
    let (_, grad) = params.gradient(&states, max_summary_len, |i, act| {
        state_loss(
            batch,
            &steps[i],
            &act.logits,
            &act.values,
            hp,
            targets,
            inv_n,
        )
        .map(|(_, g)| g)
    })?;
    let loss = evaluate_loss(batch, params, hp, targets, max_summary_len)?;
    Ok((loss, grad))
}

/// PPO loss of `params` on `batch` for the channels named by `selector`.
pub fn ppo_loss(
    batch: &RolloutBatch,
    params: &PolicyParams,
    hp: &Hyperparams,
    selector: &ChannelSelector,
    max_summary_len: usize,
) -> Result<LossBreakdown> {
    let targets = loss_targets(batch, selector, hp)?;
    evaluate_loss(batch, params, hp, &[&targets], max_summary_len)
}

/// Samples one episode per document, scores it, and fills in shaped
/// rewards, advantages, and returns for every channel.
///
/// Episode `j` draws from stream `(cfg.seed, first_episode + j)`, and
/// results are gathered in document order, so the batch does not depend on
/// how rollouts are scheduled.
pub fn collect_rollouts(
    policy: &PolicyParams,
    reference: &PolicyParams,
    docs: &[(usize, &Document)],
    cfg: &EpisodeConfig,
    hp: &Hyperparams,
    scorer: &dyn RewardModel,
    first_episode: u64,
) -> Result<RolloutBatch> {
    if scorer.channels() != policy.shape().channels {
        return Err(Error::config(format!(
            "reward model has {} channels but the value head has {}",
            scorer.channels(),
            policy.shape().channels
        )));
    }
    let trajectories: Vec<Result<Trajectory>> = docs
        .par_iter()
        .enumerate()
        .map(|(j, &(doc_id, doc))| {
            let mut rng = rng::stream(cfg.seed, Purpose::Episode, first_episode + j as u64);
            let episode = rollout(policy, reference, doc, cfg, &mut rng)?;
            let rewards = scorer.score(doc, episode.summary(), episode.emitted_eos());
            Trajectory::from_episode(doc_id, doc.clone(), episode, rewards, hp)
        })
        .collect();
    Ok(RolloutBatch::new(
        trajectories.into_iter().collect::<Result<_>>()?,
    ))
}
