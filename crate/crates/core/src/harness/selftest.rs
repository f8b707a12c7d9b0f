//! Fast invariant checks runnable from the command line.

use rand::Rng;

use crate::mdo::{pcgrad_project_traced, select_min_dimension, GradientVector};
use crate::policy::{PolicyParams, PolicyShape};
use crate::ppo::{
    collect_rollouts, compute_gae, loss_and_gradient, loss_targets, ChannelSelector, Hyperparams,
};
use crate::rewards::{score_dimensions, DimScores, Dimension, DimensionScorer};
use crate::rng::{self, Purpose};
use crate::toyenv::{generate_document, Document, EpisodeConfig, Vocabulary};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn gae_matches_explicit_sum() -> Check {
    let mut rng = rng::stream(0, Purpose::Test, 1);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let len = rng.random_range(1..=10);
        let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma = [0.0, 0.5, 0.9, 1.0][rng.random_range(0..4)];
        let lambda = [0.0, 0.5, 0.9, 1.0][rng.random_range(0..4)];
        let Ok((adv, _)) = compute_gae(&r, &v, gamma, lambda) else {
            return check("gae", false, "compute_gae failed".into());
        };
        for t in 0..len {
            let mut sum = 0.0;
            let mut w = 1.0;
            for j in t..len {
                let next = if j + 1 < len { v[j + 1] } else { 0.0 };
                sum += w * (r[j] + gamma * next - v[j]);
                w *= gamma * lambda;
            }
            worst = worst.max((adv[t] - sum).abs());
        }
    }
    check("gae", worst <= 1e-10, format!("max abs error {worst:.3e}"))
}

fn projections_remove_conflict() -> Check {
    let mut rng = rng::stream(0, Purpose::Test, 2);
    let mut failures = 0;
    for _ in 0..500 {
        let dim = rng.random_range(1..=50);
        let grads: Vec<GradientVector> = (0..4)
            .map(|_| GradientVector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let Ok((_, trace)) = pcgrad_project_traced(&grads, &mut rng) else {
            return check("pcgrad", false, "projection failed".into());
        };
        failures += trace
            .iter()
            .filter(|s| s.dot_after < -1e-9 * s.norm_task * s.norm_against)
            .count();
    }
    check(
        "pcgrad",
        failures == 0,
        format!("{failures} conflicting pairs after projection"),
    )
}

fn identical_reference_means_no_penalty() -> Result<Check> {
    let vocab = Vocabulary::default();
    let docs: Vec<Document> = (0..8)
        .map(|s| generate_document(&vocab, s))
        .collect::<Result<_>>()?;
    let refs: Vec<(usize, &Document)> = docs.iter().enumerate().collect();
    let p = PolicyParams::init(PolicyShape::new(64, 16, 4), 0);
    let batch = collect_rollouts(
        &p,
        &p,
        &refs,
        &EpisodeConfig::default(),
        &Hyperparams::default(),
        &DimensionScorer,
        0,
    )?;
    let ok = batch.trajectories.iter().all(|t| {
        let last = t.len() - 1;
        t.kl_rewards.iter().all(|&k| k == 0.0) && t.shaped_rewards[last] == t.dim_rewards
    });
    Ok(check(
        "kl-shaping",
        ok,
        format!("{} episodes", batch.trajectories.len()),
    ))
}

fn gradient_matches_finite_differences() -> Result<Check> {
    let vocab = Vocabulary::default();
    let docs: Vec<Document> = (0..3)
        .map(|s| generate_document(&vocab, s))
        .collect::<Result<_>>()?;
    let refs: Vec<(usize, &Document)> = docs.iter().enumerate().collect();
    let reference = PolicyParams::init(PolicyShape::new(64, 8, 4), 1);
    let hp = Hyperparams::default();
    let cfg = EpisodeConfig::default();
    let batch = collect_rollouts(
        &reference,
        &reference,
        &refs,
        &cfg,
        &hp,
        &DimensionScorer,
        0,
    )?;
    let mut params = reference.clone();
    let mut rng = rng::stream(0, Purpose::Test, 3);
    for x in params.flat_mut() {
        *x += rng.random_range(-0.02..0.02);
    }
    let targets = loss_targets(&batch, &ChannelSelector::Summed, &hp)?;
    let (_, grad) = loss_and_gradient(&batch, &params, &hp, &[&targets], cfg.max_summary_len)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let i = rng.random_range(0..params.len());
        let mut plus = params.clone();
        plus.flat_mut()[i] += h;
        let mut minus = params.clone();
        minus.flat_mut()[i] -= h;
        let (lp, _) = loss_and_gradient(&batch, &plus, &hp, &[&targets], cfg.max_summary_len)?;
        let (lm, _) = loss_and_gradient(&batch, &minus, &hp, &[&targets], cfg.max_summary_len)?;
        let fd = (lp.total - lm.total) / (2.0 * h);
        let rel = (grad.0[i] - fd).abs() / grad.0[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(check(
        "gradient",
        worst <= 1e-4,
        format!("max relative error {worst:.3e}"),
    ))
}

fn min_selection_and_score_ranges() -> Result<Check> {
    let (dim, _) = select_min_dimension(&DimScores::new(0.838, 0.833, 0.845, 0.779));
    let vocab = Vocabulary::default();
    let mut in_range = true;
    let mut rng = rng::stream(0, Purpose::Test, 4);
    for s in 0..100 {
        let d = generate_document(&vocab, s)?;
        let len = rng.random_range(0..16);
        let summary: Vec<u32> = (0..len).map(|_| rng.random_range(0..64)).collect();
        let scores = score_dimensions(&d, &summary, rng.random_bool(0.5)).to_array();
        in_range &= scores.iter().all(|x| (0.0..=1.0).contains(x));
    }
    Ok(check(
        "scores",
        dim == Dimension::Relevance && in_range,
        format!("min dimension {}, scores in [0,1]: {in_range}", dim.name()),
    ))
}

/// Runs every check. Errors inside a check abort the run.
pub fn run() -> Result<Vec<Check>> {
    Ok(vec![
        gae_matches_explicit_sum(),
        projections_remove_conflict(),
        identical_reference_means_no_penalty()?,
        gradient_matches_finite_differences()?,
        min_selection_and_score_ranges()?,
    ])
}
