use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::PolicyParams;
use crate::ppo::LossBreakdown;
use crate::rewards::{coverage, score_dimensions, summary_length};
use crate::toyenv::{decode_greedy, log_softmax, Document, EpisodeConfig};
use crate::{Error, Result};

/// Column order of the metrics CSV.
pub const METRICS_COLUMNS: [&str; 14] = [
    "iteration",
    "coherence",
    "consistency",
    "fluency",
    "relevance",
    "overall",
    "min_dim",
    "mean_length",
    "coverage",
    "mean_kl",
    "clip_loss",
    "value_loss",
    "entropy",
    "total_loss",
];

/// One held-out evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub coherence: f64,
    pub consistency: f64,
    pub fluency: f64,
    pub relevance: f64,
    pub overall: f64,
    /// Mean over documents of each document's lowest dimension score.
    pub min_dim: f64,
    pub mean_length: f64,
    pub coverage: f64,
    /// Mean per-token KL(π‖π_ref) over the greedily visited states.
    pub mean_kl: f64,
    pub clip_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
}

impl MetricsRow {
    pub fn dims(&self) -> [f64; 4] {
        [
            self.coherence,
            self.consistency,
            self.fluency,
            self.relevance,
        ]
    }

    /// Max minus min of the four dimension means.
    pub fn spread(&self) -> f64 {
        let d = self.dims();
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn with_loss(mut self, loss: &LossBreakdown) -> Self {
        self.clip_loss = loss.clip_loss;
        self.value_loss = loss.value_loss;
        self.entropy = loss.entropy;
        self.total_loss = loss.total;
        self
    }

    pub fn values(&self) -> [f64; 13] {
        [
            self.coherence,
            self.consistency,
            self.fluency,
            self.relevance,
            self.overall,
            self.min_dim,
            self.mean_length,
            self.coverage,
            self.mean_kl,
            self.clip_loss,
            self.value_loss,
            self.entropy,
            self.total_loss,
        ]
    }
}

struct DocEval {
    dims: [f64; 4],
    length: f64,
    coverage: f64,
    kl_sum: f64,
    steps: usize,
}

fn kl(p_log: &[f64], q_log: &[f64]) -> f64 {
    p_log
        .iter()
        .zip(q_log)
        .map(|(&lp, &lq)| {
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                lp.exp() * (lp - lq)
            }
        })
        .sum()
}

fn evaluate_doc(
    policy: &PolicyParams,
    reference: &PolicyParams,
    doc: &Document,
    cfg: &EpisodeConfig,
) -> Result<DocEval> {
    let ep = decode_greedy(policy, None, doc, cfg)?;
    let mut kl_sum = 0.0;
    for t in 0..ep.tokens.len() {
        let prefix = &ep.tokens[..t];
        let p = policy.forward(&doc.tokens, prefix, cfg.max_summary_len)?;
        let q = reference.forward(&doc.tokens, prefix, cfg.max_summary_len)?;
        kl_sum += kl(&log_softmax(&p.logits), &log_softmax(&q.logits));
    }
    let summary = ep.summary();
    Ok(DocEval {
        dims: score_dimensions(doc, summary, ep.emitted_eos()).to_array(),
        length: summary_length(&ep.tokens) as f64,
        coverage: coverage(doc, summary),
        kl_sum,
        steps: ep.tokens.len(),
    })
}

/// Greedy-decodes every document and averages the scores. Loss columns
/// are left at zero.
pub fn evaluate(
    policy: &PolicyParams,
    reference: &PolicyParams,
    docs: &[Document],
    cfg: &EpisodeConfig,
    iteration: usize,
) -> Result<MetricsRow> {
    if docs.is_empty() {
        return Err(Error::config("evaluation needs at least one document"));
    }
    let per_doc: Vec<DocEval> = docs
        .par_iter()
        .map(|d| evaluate_doc(policy, reference, d, cfg))
        .collect::<Result<_>>()?;

    let n = docs.len() as f64;
    let mut dims = [0.0; 4];
    let (mut min_dim, mut length, mut cov, mut kl_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut steps = 0usize;
    for e in &per_doc {
        for (acc, x) in dims.iter_mut().zip(e.dims) {
            *acc += x;
        }
        min_dim += e.dims.iter().copied().fold(f64::INFINITY, f64::min);
        length += e.length;
        cov += e.coverage;
        kl_sum += e.kl_sum;
        steps += e.steps;
    }
    let dims = dims.map(|x| x / n);
    Ok(MetricsRow {
        iteration,
        coherence: dims[0],
        consistency: dims[1],
        fluency: dims[2],
        relevance: dims[3],
        overall: dims.iter().sum::<f64>() / 4.0,
        min_dim: min_dim / n,
        mean_length: length / n,
        coverage: cov / n,
        mean_kl: if steps == 0 {
            0.0
        } else {
            kl_sum / steps as f64
        },
        clip_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        total_loss: 0.0,
    })
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for row in rows {
        let mut record = vec![row.iteration.to_string()];
        record.extend(row.values().iter().map(|x| x.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Parses a metrics CSV. Errors name `path` and the offending line.
pub fn read_metrics<R: Read>(input: R, path: &Path) -> Result<Vec<MetricsRow>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::Reader::from_reader(input);
    let headers = r
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.iter().ne(METRICS_COLUMNS.iter().copied()) {
        return Err(parse_err(
            1,
            format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        ));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let iteration: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad iteration {:?}", &record[0])))?;
        let mut v = [0.0; 13];
        for (i, slot) in v.iter_mut().enumerate() {
            let field = &record[i + 1];
            *slot = field.trim().parse().map_err(|_| {
                parse_err(
                    line,
                    format!("bad {} value {field:?}", METRICS_COLUMNS[i + 1]),
                )
            })?;
        }
        rows.push(MetricsRow {
            iteration,
            coherence: v[0],
            consistency: v[1],
            fluency: v[2],
            relevance: v[3],
            overall: v[4],
            min_dim: v[5],
            mean_length: v[6],
            coverage: v[7],
            mean_kl: v[8],
            clip_loss: v[9],
            value_loss: v[10],
            entropy: v[11],
            total_loss: v[12],
        });
    }
    Ok(rows)
}
