//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 6–8 share one set of training runs per seed: documents and the
//! pretrained reference are built once, then Min, SumR, Pro and the γ sweep
//! all start from that reference.

use std::path::PathBuf;
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use mdo_core::harness::{
    prepare, report, sweep_with, train_with, write_metrics, TrainConfig, TrainOutcome,
};
use mdo_core::mdo::{
    pcgrad_project, pcgrad_project_traced, select_min_dimension, GradientVector, Strategy,
};
use mdo_core::policy::{PolicyParams, PolicyShape};
use mdo_core::ppo::{
    collect_rollouts, compute_gae, evaluate_loss, loss_and_gradient, loss_targets, ChannelSelector,
    Hyperparams,
};
use mdo_core::rewards::{DimScores, Dimension, DimensionScorer};
use mdo_core::rng::{stream, Purpose};
use mdo_core::toyenv::{Document, EpisodeConfig, Vocabulary};

const SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP_GAMMAS: [f64; 4] = [0.5, 0.7, 0.9, 0.99];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// `Σ_i (γλ)^i δ_{t+i}` with `δ_j = r_j + γ V_{j+1} − V_j` and `V_L = 0`.
fn explicit_gae(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let len = r.len();
    let value = |j: usize| if j < len { v[j] } else { 0.0 };
    (0..len)
        .map(|t| {
            (t..len)
                .map(|j| {
                    (gamma * lambda).powi((j - t) as i32) * (r[j] + gamma * value(j + 1) - v[j])
                })
                .sum()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let grid = [0.0, 0.5, 0.9, 1.0];
    let mut rng = stream(101, Purpose::Test, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.random_range(1..=10);
        let r: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gamma = grid[rng.random_range(0..4)];
        let lambda = grid[rng.random_range(0..4)];
        let (adv, _) = compute_gae(&r, &v, gamma, lambda).expect("gae");
        for (a, b) in adv.iter().zip(explicit_gae(&r, &v, gamma, lambda)) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("max |error| {worst:.2e} (tol 1e-10), {elapsed:.2?} (limit 1s)"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let vocab = Vocabulary::default();
    let shape = PolicyShape::new(64, 32, 4);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for config in 0..10u64 {
        let mut rng = stream(202, Purpose::Test, config);
        let docs: Vec<Document> = (0..3)
            .map(|i| {
                Document::sample(&vocab, &mut stream(202 + config, Purpose::Document, i))
                    .expect("doc")
            })
            .collect();
        let refs: Vec<(usize, &Document)> = docs.iter().enumerate().collect();
        let hp = Hyperparams {
            gamma: rng.random_range(0.5..1.0),
            gae_lambda: rng.random_range(0.5..1.0),
            kl_beta: rng.random_range(0.0..0.5),
            clip_epsilon: rng.random_range(0.1..0.3),
            value_coef: rng.random_range(0.1..1.0),
            entropy_coef: rng.random_range(0.0..0.05),
            ..Hyperparams::default()
        };
        let old = PolicyParams::init(shape, 1000 + config);
        let reference = PolicyParams::init(shape, 2000 + config);
        let cfg = EpisodeConfig {
            max_summary_len: 16,
            seed: config,
        };
        let batch = collect_rollouts(&old, &reference, &refs, &cfg, &hp, &DimensionScorer, 0)
            .expect("rollouts");
        let flat: Vec<f64> = old
            .flat()
            .iter()
            .map(|x| x + rng.random_range(-0.03..0.03))
            .collect();
        let params = PolicyParams::from_flat(shape, flat).expect("params");
        let selector = match config % 3 {
            0 => ChannelSelector::Channel(rng.random_range(0..4)),
            1 => ChannelSelector::PerTrajectory((0..3).map(|_| rng.random_range(0..4)).collect()),
            _ => ChannelSelector::Summed,
        };
        let targets = loss_targets(&batch, &selector, &hp).expect("targets");
        let (_, grad) = loss_and_gradient(&batch, &params, &hp, &[&targets], 16).expect("gradient");
        let loss_at = |i: usize, delta: f64| {
            let mut f = params.flat().to_vec();
            f[i] += delta;
            let p = PolicyParams::from_flat(shape, f).expect("params");
            evaluate_loss(&batch, &p, &hp, &[&targets], 16)
                .expect("loss")
                .total
        };
        for _ in 0..32 {
            let i = rng.random_range(0..shape.num_params());
            let fd = (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h);
            let a = grad.0[i];
            let scale = a.abs().max(fd.abs());
            // Coordinates the loss does not depend on give exactly zero on both sides.
            let rel = if scale == 0.0 {
                0.0
            } else {
                (a - fd).abs() / scale.max(1e-6)
            };
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && elapsed < Duration::from_secs(30),
        format!("{checked} coordinates, max relative error {worst:.2e} (tol 1e-4), {elapsed:.2?} (limit 30s)"),
    )
}

fn random_vec<R: Rng>(rng: &mut R, dim: usize, lo: f64, hi: f64) -> GradientVector {
    GradientVector((0..dim).map(|_| rng.random_range(lo..hi)).collect())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(303, Purpose::Test, 0);
    let (mut a_fail, mut b_fail, mut c_fail) = (0, 0, 0);
    let mut worst_b = f64::INFINITY;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=50);

        // (a) Non-negative vectors never conflict.
        let calm: Vec<GradientVector> = (0..4)
            .map(|_| random_vec(&mut rng, dim, 0.0, 1.0))
            .collect();
        let mut expected = GradientVector::zeros(dim);
        for g in &calm {
            expected += g;
        }
        let got = pcgrad_project(&calm, &mut rng).expect("project");
        if got != expected {
            a_fail += 1;
        }

        // (b) Arbitrary quadruples.
        let grads: Vec<GradientVector> = (0..4)
            .map(|_| random_vec(&mut rng, dim, -1.0, 1.0))
            .collect();
        let (_, trace) = pcgrad_project_traced(&grads, &mut rng).expect("project");
        for s in &trace {
            let bound = -1e-9 * s.norm_task * s.norm_against;
            if s.dot_after < bound {
                b_fail += 1;
            }
            let slack = if s.norm_task * s.norm_against > 0.0 {
                s.dot_after / (s.norm_task * s.norm_against)
            } else {
                0.0
            };
            worst_b = worst_b.min(slack);
        }

        // (c) g and −g.
        let g = random_vec(&mut rng, dim, -1.0, 1.0);
        let mut neg = g.clone();
        neg.scale(-1.0);
        let sum = pcgrad_project(&[g, neg], &mut rng).expect("project");
        if sum.0.iter().any(|&x| x != 0.0) {
            c_fail += 1;
        }
    }
    // (d) Worked example: g1 = (1, 0), g2 = (−1, 1).
    let g1 = GradientVector(vec![1.0, 0.0]);
    let g2 = GradientVector(vec![-1.0, 1.0]);
    let worked = pcgrad_project(&[g1, g2], &mut rng).expect("project");
    let d_ok = (worked.0[0] - 0.5).abs() < 1e-12 && (worked.0[1] - 1.5).abs() < 1e-12;

    let elapsed = start.elapsed();
    outcome(
        a_fail == 0 && b_fail == 0 && c_fail == 0 && d_ok && elapsed < Duration::from_secs(1),
        format!(
            "(a) {a_fail} altered, (b) {b_fail} violations (min cos after {worst_b:.2e}), (c) {c_fail} non-zero, (d) {:?}, {elapsed:.2?} (limit 1s)",
            worked.0
        ),
    )
}

fn criterion_4() -> Outcome {
    let vocab = Vocabulary::default();
    let shape = PolicyShape::new(64, 32, 4);
    let hp = Hyperparams::default();
    let mut episodes = 0;
    let mut violations = 0;
    for round in 0..25u64 {
        let policy = PolicyParams::init(shape, 400 + round);
        let reference = PolicyParams::from_flat(shape, policy.flat().to_vec()).expect("copy");
        let docs: Vec<Document> = (0..4)
            .map(|i| {
                Document::sample(&vocab, &mut stream(404, Purpose::Document, round * 4 + i))
                    .expect("doc")
            })
            .collect();
        let refs: Vec<(usize, &Document)> = docs.iter().enumerate().collect();
        let cfg = EpisodeConfig {
            max_summary_len: 16,
            seed: round,
        };
        let batch = collect_rollouts(&policy, &reference, &refs, &cfg, &hp, &DimensionScorer, 0)
            .expect("rollouts");
        for t in &batch.trajectories {
            episodes += 1;
            let last = t.len() - 1;
            let quiet = t.shaped_rewards[..last].iter().flatten().all(|&r| r == 0.0);
            if !quiet || t.shaped_rewards[last] != t.dim_rewards {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0 && episodes == 100,
        format!("{episodes} episodes, {violations} violations"),
    )
}

fn criterion_5() -> Outcome {
    let (a, _) = select_min_dimension(&DimScores::new(0.838, 0.833, 0.845, 0.779));
    let (b, _) = select_min_dimension(&DimScores::new(0.823, 0.832, 0.849, 0.814));
    outcome(
        a == Dimension::Relevance && b == Dimension::Coherence,
        format!(
            "(0.838, 0.833, 0.845, 0.779) -> {} (want relevance); (0.823, 0.832, 0.849, 0.814) -> {} (want coherence)",
            a.name(),
            b.name()
        ),
    )
}

struct SeedRuns {
    seed: u64,
    min: TrainOutcome,
    sum_r: TrainOutcome,
    pro: TrainOutcome,
    slowest: Duration,
    sweep: Vec<(f64, f64)>,
    report_spreads: (f64, f64),
}

fn timed(cfg: &TrainConfig, setup: &mdo_core::harness::Setup) -> (TrainOutcome, Duration) {
    let start = Instant::now();
    let out = train_with(cfg, setup).expect("training run");
    (out, start.elapsed())
}

fn run_seed(seed: u64, scratch: &std::path::Path) -> SeedRuns {
    let base = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let setup = prepare(&base).expect("setup");
    let with = |strategy| TrainConfig {
        strategy,
        ..base.clone()
    };
    let (min, t_min) = timed(&with(Strategy::Min), &setup);
    let (sum_r, t_sum_r) = timed(&with(Strategy::SumR), &setup);
    let (pro, t_pro) = timed(&with(Strategy::Pro), &setup);
    let sweep = sweep_with(&base, &setup, &SWEEP_GAMMAS)
        .expect("sweep")
        .into_iter()
        .map(|(row, _)| (row.gamma, row.mean_length))
        .collect();

    let mut files = Vec::new();
    for (label, out) in [("sum-r", &sum_r), ("pro", &pro)] {
        let dir = scratch.join(format!("seed{seed}")).join(label);
        std::fs::create_dir_all(&dir).expect("mkdir");
        let path = dir.join("metrics.csv");
        write_metrics(std::fs::File::create(&path).expect("create"), &out.rows).expect("write");
        files.push(path);
    }
    let rows = report(&files).expect("report");
    SeedRuns {
        seed,
        min,
        sum_r,
        pro,
        slowest: t_min.max(t_sum_r).max(t_pro),
        sweep,
        report_spreads: (rows[0].spread, rows[1].spread),
    }
}

fn criterion_6(runs: &[SeedRuns]) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for r in runs {
        let lift = r.min.last().min_dim - r.min.first().min_dim;
        let beats = r.min.last().min_dim > r.sum_r.last().min_dim;
        let ok = lift >= 0.05 && beats;
        wins += ok as usize;
        parts.push(format!(
            "seed {}: lift {lift:+.4} (need >= 0.05), min {:.4} vs sum-r {:.4}",
            r.seed,
            r.min.last().min_dim,
            r.sum_r.last().min_dim
        ));
    }
    let slowest = runs.iter().map(|r| r.slowest).max().unwrap_or_default();
    outcome(
        wins >= 2 && slowest < Duration::from_secs(600),
        format!(
            "{wins}/3 seeds; {}; slowest run {slowest:.1?} (limit 10 min)",
            parts.join("; ")
        ),
    )
}

fn criterion_7(runs: &[SeedRuns]) -> Outcome {
    let length = |r: &SeedRuns, g: f64| {
        r.sweep
            .iter()
            .find(|(gamma, _)| *gamma == g)
            .map(|(_, l)| *l)
            .unwrap()
    };
    let wins = runs
        .iter()
        .filter(|r| length(r, 0.99) < length(r, 0.5))
        .count();
    let parts: Vec<String> = runs
        .iter()
        .map(|r| {
            let lens: Vec<String> = r.sweep.iter().map(|(g, l)| format!("{g}:{l:.3}")).collect();
            format!("seed {} lengths {}", r.seed, lens.join(" "))
        })
        .collect();
    outcome(
        wins >= 2,
        format!(
            "len(0.99) < len(0.5) on {wins}/3 seeds; {}",
            parts.join("; ")
        ),
    )
}

fn criterion_8(runs: &[SeedRuns]) -> Outcome {
    let wins = runs
        .iter()
        .filter(|r| r.report_spreads.0 >= r.report_spreads.1)
        .count();
    let consistent = runs.iter().all(|r| {
        r.report_spreads.0 == r.sum_r.last().spread() && r.report_spreads.1 == r.pro.last().spread()
    });
    let parts: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: sum-r {:.4} vs pro {:.4}",
                r.seed, r.report_spreads.0, r.report_spreads.1
            )
        })
        .collect();
    outcome(
        wins >= 2 && consistent,
        format!(
            "spread(sum-r) >= spread(pro) on {wins}/3 seeds; {}",
            parts.join("; ")
        ),
    )
}

fn criterion_9(scratch: &std::path::Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_mdo");
    let run = |name: &str| -> Option<Vec<u8>> {
        let dir: PathBuf = scratch.join(name);
        let status = Command::new(bin)
            .args(["train", "--strategy", "pro", "--seed", "7", "--output-dir"])
            .arg(&dir)
            .env_remove("MDO_SEED")
            .stdout(Stdio::null())
            .status()
            .ok()?;
        if !status.success() {
            return None;
        }
        std::fs::read(dir.join("metrics.csv")).ok()
    };
    match (run("first"), run("second")) {
        (Some(a), Some(b)) => outcome(
            a == b && !a.is_empty(),
            format!(
                "two `mdo train` runs, {} vs {} bytes, identical: {}",
                a.len(),
                b.len(),
                a == b
            ),
        ),
        _ => outcome(false, "`mdo train` failed".into()),
    }
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("tempdir");
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "GAE matches explicit delta sums", criterion_1()),
        (2, "PPO gradient matches finite differences", criterion_2()),
        (3, "conflict projection invariants", criterion_3()),
        (
            4,
            "KL shaping vanishes against an identical reference",
            criterion_4(),
        ),
        (5, "min selection on the reported rows", criterion_5()),
    ];

    let runs: Vec<SeedRuns> = SEEDS
        .par_iter()
        .map(|&s| run_seed(s, scratch.path()))
        .collect();
    results.push((6, "min lifts the lowest dimension", criterion_6(&runs)));
    results.push((
        7,
        "larger discount gives shorter summaries",
        criterion_7(&runs),
    ));
    results.push((8, "sum-r is more imbalanced than pro", criterion_8(&runs)));
    results.push((
        9,
        "train is byte-for-byte deterministic",
        criterion_9(scratch.path()),
    ));

    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        failed += !o.passed as usize;
        println!("{tag} criterion {n}: {name}: {}", o.detail);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
