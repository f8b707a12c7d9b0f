use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::metrics::{evaluate, write_metrics, MetricsRow};
use crate::mdo::mdo_update;
use crate::policy::{supervised_pretrain, OptimizerState, PolicyParams, PretrainReport};
use crate::ppo::collect_rollouts;
use crate::rewards::DimensionScorer;
use crate::rng::{self, Purpose};
use crate::toyenv::{Document, Token, Vocabulary};
use crate::{Error, Result};

/// Documents and frozen reference shared by every run with the same seed.
#[derive(Debug, Clone)]
pub struct Setup {
    pub train_docs: Vec<Document>,
    pub eval_docs: Vec<Document>,
    pub reference: PolicyParams,
    /// Present when the reference was pretrained here rather than loaded.
    pub pretrain: Option<PretrainReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
}

impl TrainOutcome {
    pub fn first(&self) -> &MetricsRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &MetricsRow {
        &self.rows[self.rows.len() - 1]
    }
}

fn document(vocab: &Vocabulary, seed: u64, index: u64) -> Result<Document> {
    Document::sample(vocab, &mut rng::stream(seed, Purpose::Document, index))
}

/// Training documents are stream indices `0..pool`; held-out documents come
/// from later indices, skipping any that duplicate a training document.
pub fn document_split(cfg: &TrainConfig) -> Result<(Vec<Document>, Vec<Document>)> {
    let vocab = cfg.vocabulary()?;
    let train: Vec<Document> = (0..cfg.docs_pool_size as u64)
        .map(|i| document(&vocab, cfg.seed, i))
        .collect::<Result<_>>()?;
    let seen: HashSet<&[Token]> = train.iter().map(|d| d.tokens.as_slice()).collect();
    let mut eval = Vec::with_capacity(cfg.eval_docs);
    let mut index = cfg.docs_pool_size as u64;
    while eval.len() < cfg.eval_docs {
        let d = document(&vocab, cfg.seed, index)?;
        if !seen.contains(d.tokens.as_slice()) {
            eval.push(d);
        }
        index += 1;
    }
    Ok((train, eval))
}

/// Builds the document split and pretrains (or loads) the reference policy.
pub fn prepare(cfg: &TrainConfig) -> Result<Setup> {
    cfg.validate()?;
    let (train_docs, eval_docs) = document_split(cfg)?;
    let (reference, pretrain) = match &cfg.reference_checkpoint {
        Some(path) => {
            let params = Checkpoint::load(path)?.params()?;
            if params.shape() != cfg.shape() {
                return Err(Error::config(format!(
                    "reference checkpoint shape {:?} does not match config shape {:?}",
                    params.shape(),
                    cfg.shape()
                )));
            }
            (params, None)
        }
        None => {
            let (params, report) = supervised_pretrain(
                &train_docs,
                cfg.shape(),
                cfg.max_summary_len,
                &cfg.pretrain_config(),
            )?;
            (params, Some(report))
        }
    };
    Ok(Setup {
        train_docs,
        eval_docs,
        reference,
        pretrain,
    })
}

/// Visits the training pool in a fresh shuffled order each epoch.
struct BatchSampler {
    seed: u64,
    pool: usize,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl BatchSampler {
    fn new(seed: u64, pool: usize) -> Self {
        BatchSampler {
            seed,
            pool,
            epoch: None,
            order: (0..pool).collect(),
        }
    }

    fn at(&mut self, k: usize) -> usize {
        let epoch = (k / self.pool) as u64;
        if self.epoch != Some(epoch) {
            self.order = (0..self.pool).collect();
            self.order
                .shuffle(&mut rng::stream(self.seed, Purpose::Shuffle, epoch));
            self.epoch = Some(epoch);
        }
        self.order[k % self.pool]
    }
}

/// Runs the RL loop from the reference policy. Touches no files.
pub fn train_with(cfg: &TrainConfig, setup: &Setup) -> Result<TrainOutcome> {
    cfg.validate()?;
    if setup.train_docs.len() != cfg.docs_pool_size {
        return Err(Error::config("setup does not match docs_pool_size"));
    }
    let ep_cfg = cfg.episode_config();
    let hp = cfg.hyper;
    let reference = &setup.reference;
    let mut params = reference.clone();
    let mut optimizer = OptimizerState::new(cfg.optimizer);
    let mut sampler = BatchSampler::new(cfg.seed, cfg.docs_pool_size);

    let mut rows = vec![evaluate(&params, reference, &setup.eval_docs, &ep_cfg, 0)?];
    for it in 0..cfg.iterations {
        let wrap = |e: Error| Error::Iteration {
            iteration: it,
            source: Box::new(e),
        };
        let first = it * hp.batch_size;
        let docs: Vec<(usize, &Document)> = (first..first + hp.batch_size)
            .map(|k| {
                let i = sampler.at(k);
                (i, &setup.train_docs[i])
            })
            .collect();
        let batch = collect_rollouts(
            &params,
            reference,
            &docs,
            &ep_cfg,
            &hp,
            &DimensionScorer,
            first as u64,
        )
        .map_err(wrap)?;
        let step = mdo_update(
            cfg.strategy,
            &batch,
            &mut params,
            &hp,
            &mut optimizer,
            cfg.max_summary_len,
            cfg.seed,
            it as u64,
        )
        .map_err(wrap)?;

        let done = it + 1;
        if done % cfg.eval_interval == 0 || done == cfg.iterations {
            let row =
                evaluate(&params, reference, &setup.eval_docs, &ep_cfg, done).map_err(wrap)?;
            rows.push(row.with_loss(&step.loss));
        }
    }
    Ok(TrainOutcome {
        rows,
        params,
        optimizer,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// Writes `metrics.csv`, `checkpoint.json` and `config.json` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    create_dir(dir)?;
    write_metrics(create_file(&dir.join("metrics.csv"))?, &outcome.rows)?;
    Checkpoint::new(&outcome.params, &outcome.optimizer).save(&dir.join("checkpoint.json"))?;
    let config = dir.join("config.json");
    std::fs::write(&config, cfg.to_json_pretty()?).map_err(|e| Error::io(&config, e))
}

/// Pretrains (or loads) the reference, trains, and writes the outputs.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let setup = prepare(cfg)?;
    let outcome = train_with(cfg, &setup)?;
    write_outputs(&cfg.output_dir, cfg, &outcome)?;
    Ok(outcome)
}

/// Pretrains the reference alone and saves it as `reference.json`.
pub fn run_pretrain(cfg: &TrainConfig) -> Result<(PathBuf, Setup)> {
    let cfg = TrainConfig {
        reference_checkpoint: None,
        ..cfg.clone()
    };
    let setup = prepare(&cfg)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("reference.json");
    Checkpoint::params_only(&setup.reference).save(&path)?;
    Ok((path, setup))
}

pub const SWEEP_COLUMNS: [&str; 6] = [
    "gamma",
    "mean_length",
    "coherence",
    "consistency",
    "fluency",
    "relevance",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub mean_length: f64,
    pub coherence: f64,
    pub consistency: f64,
    pub fluency: f64,
    pub relevance: f64,
}

impl SweepRow {
    fn from_final(gamma: f64, row: &MetricsRow) -> Self {
        SweepRow {
            gamma,
            mean_length: row.mean_length,
            coherence: row.coherence,
            consistency: row.consistency,
            fluency: row.fluency,
            relevance: row.relevance,
        }
    }
}

fn check_gammas(gammas: &[f64]) -> Result<()> {
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
        return Err(Error::config(format!("gamma {g} is outside (0, 1]")));
    }
    let distinct: HashSet<u64> = gammas.iter().map(|g| g.to_bits()).collect();
    if distinct.len() < 2 {
        return Err(Error::config(
            "a sweep needs at least two distinct gamma values",
        ));
    }
    Ok(())
}

/// Trains once per γ from a shared setup. Runs in parallel; results keep
/// the order of `gammas`.
pub fn sweep_with(
    cfg: &TrainConfig,
    setup: &Setup,
    gammas: &[f64],
) -> Result<Vec<(SweepRow, TrainOutcome)>> {
    check_gammas(gammas)?;
    gammas
        .par_iter()
        .map(|&gamma| {
            let mut c = cfg.clone();
            c.hyper.gamma = gamma;
            let outcome = train_with(&c, setup)?;
            Ok((SweepRow::from_final(gamma, outcome.last()), outcome))
        })
        .collect()
}

pub fn sweep_dir(root: &Path, gamma: f64) -> PathBuf {
    root.join(format!("gamma_{gamma}"))
}

/// Runs [`sweep_with`] and writes per-γ outputs plus `sweep.csv`.
pub fn gamma_sweep(cfg: &TrainConfig, gammas: &[f64]) -> Result<Vec<SweepRow>> {
    check_gammas(gammas)?;
    let setup = prepare(cfg)?;
    let results = sweep_with(cfg, &setup, gammas)?;
    create_dir(&cfg.output_dir)?;
    for (row, outcome) in &results {
        let mut c = cfg.clone();
        c.hyper.gamma = row.gamma;
        c.output_dir = sweep_dir(&cfg.output_dir, row.gamma);
        write_outputs(&c.output_dir, &c, outcome)?;
    }
    let rows: Vec<SweepRow> = results.into_iter().map(|(r, _)| r).collect();
    let mut w = csv::Writer::from_writer(create_file(&cfg.output_dir.join("sweep.csv"))?);
    w.write_record(SWEEP_COLUMNS)?;
    for r in &rows {
        w.write_record(
            [
                r.gamma,
                r.mean_length,
                r.coherence,
                r.consistency,
                r.fluency,
                r.relevance,
            ]
            .map(|x| x.to_string()),
        )?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(rows)
}
