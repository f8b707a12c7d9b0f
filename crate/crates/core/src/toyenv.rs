//! Synthetic summarization environment.
//!
//! A document is a bag of filler tokens with a handful of salient tokens
//! scattered through it. The ideal summary lists the salient tokens in the
//! order they first appear, then stops.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::PolicyParams;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;

pub const MIN_DOC_LEN: usize = 20;
pub const MAX_DOC_LEN: usize = 60;
pub const MIN_SALIENT: usize = 3;
pub const MAX_SALIENT: usize = 8;

/// Token id layout: three reserved ids, a salient block, and filler for the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: u32,
    pub salient_lo: Token,
    pub salient_hi: Token,
    pub filler_lo: Token,
    pub filler_hi: Token,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new(64).expect("default vocabulary is valid")
    }
}

impl Vocabulary {
    /// Standard layout: salient ids `[3, 18]`, filler ids `[19, size - 1]`.
    pub fn new(size: u32) -> Result<Self> {
        let vocab = Vocabulary {
            size,
            salient_lo: 3,
            salient_hi: 18,
            filler_lo: 19,
            filler_hi: size.saturating_sub(1),
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 20 {
            return Err(Error::config(format!("vocabulary size {} < 20", self.size)));
        }
        let reserved_hi = EOS;
        // Ranges must tile [0, size-1] in order: reserved, salient, filler.
        if self.salient_lo != reserved_hi + 1
            || self.salient_hi < self.salient_lo
            || self.filler_lo != self.salient_hi + 1
            || self.filler_hi < self.filler_lo
            || self.filler_hi != self.size - 1
        {
            return Err(Error::config(format!(
                "vocabulary ranges overlap or leave gaps: salient [{}, {}], filler [{}, {}], size {}",
                self.salient_lo, self.salient_hi, self.filler_lo, self.filler_hi, self.size
            )));
        }
        if self.salient_count() < MAX_SALIENT {
            return Err(Error::config(format!(
                "salient range holds {} ids, need at least {MAX_SALIENT}",
                self.salient_count()
            )));
        }
        Ok(())
    }

    pub fn salient_count(&self) -> usize {
        (self.salient_hi - self.salient_lo + 1) as usize
    }

    pub fn filler_count(&self) -> usize {
        (self.filler_hi - self.filler_lo + 1) as usize
    }

    pub fn is_reserved(&self, t: Token) -> bool {
        t <= EOS
    }

    pub fn is_salient(&self, t: Token) -> bool {
        (self.salient_lo..=self.salient_hi).contains(&t)
    }

    pub fn is_filler(&self, t: Token) -> bool {
        (self.filler_lo..=self.filler_hi).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<Token>,
    /// Distinct salient ids in order of first occurrence.
    pub salient_order: Vec<Token>,
}

impl Document {
    /// Draws a document: uniform length, uniform salient count, salient ids
    /// placed at distinct uniform positions, uniform filler elsewhere.
    pub fn sample<R: Rng + ?Sized>(vocab: &Vocabulary, rng: &mut R) -> Result<Self> {
        vocab.validate()?;
        let len = rng.random_range(MIN_DOC_LEN..=MAX_DOC_LEN);
        let k = rng.random_range(MIN_SALIENT..=MAX_SALIENT);
        let ids = index::sample(rng, vocab.salient_count(), k);
        let positions = index::sample(rng, len, k);

        let mut tokens: Vec<Option<Token>> = vec![None; len];
        for (id, pos) in ids.iter().zip(positions.iter()) {
            tokens[pos] = Some(vocab.salient_lo + id as Token);
        }
        let filler = vocab.filler_count() as Token;
        let tokens: Vec<Token> = tokens
            .into_iter()
            .map(|t| t.unwrap_or_else(|| vocab.filler_lo + rng.random_range(0..filler)))
            .collect();
        Document::from_tokens(vocab, tokens)
    }

    /// Builds a document from raw content ids, deriving the salient order.
    pub fn from_tokens(vocab: &Vocabulary, tokens: Vec<Token>) -> Result<Self> {
        if !(MIN_DOC_LEN..=MAX_DOC_LEN).contains(&tokens.len()) {
            return Err(Error::config(format!(
                "document length {} outside [{MIN_DOC_LEN}, {MAX_DOC_LEN}]",
                tokens.len()
            )));
        }
        let mut salient_order = Vec::new();
        for &t in &tokens {
            if t >= vocab.size {
                return Err(Error::config(format!(
                    "token {t} outside vocabulary of size {}",
                    vocab.size
                )));
            }
            if vocab.is_reserved(t) {
                return Err(Error::config(format!(
                    "document contains reserved token {t}"
                )));
            }
            if vocab.is_salient(t) && !salient_order.contains(&t) {
                salient_order.push(t);
            }
        }
        if !(MIN_SALIENT..=MAX_SALIENT).contains(&salient_order.len()) {
            return Err(Error::config(format!(
                "document has {} salient tokens, expected [{MIN_SALIENT}, {MAX_SALIENT}]",
                salient_order.len()
            )));
        }
        Ok(Document {
            tokens,
            salient_order,
        })
    }

    pub fn contains(&self, t: Token) -> bool {
        self.tokens.contains(&t)
    }

    pub fn first_position(&self, t: Token) -> Option<usize> {
        self.tokens.iter().position(|&x| x == t)
    }
}

/// Deterministic document for a seed.
pub fn generate_document(vocab: &Vocabulary, seed: u64) -> Result<Document> {
    Document::sample(vocab, &mut rng::stream(seed, Purpose::Document, 0))
}

/// The target summary: salient tokens in order, then EOS.
pub fn reference_summary(doc: &Document) -> Vec<Token> {
    let mut out = doc.salient_order.clone();
    out.push(EOS);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_summary_len: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            max_summary_len: 16,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_summary_len < 2 {
            return Err(Error::config("max_summary_len must be at least 2"));
        }
        Ok(())
    }
}

/// One generated summary with everything recorded along the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Emitted tokens, including the trailing EOS when one was produced.
    pub tokens: Vec<Token>,
    pub logprobs_rl: Vec<f64>,
    pub logprobs_ft: Vec<f64>,
    /// Value-head output per step, one entry per reward channel.
    pub values: Vec<Vec<f64>>,
    pub truncated: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Content tokens, EOS stripped.
    pub fn summary(&self) -> &[Token] {
        content(&self.tokens)
    }

    pub fn emitted_eos(&self) -> bool {
        !self.truncated
    }
}

/// Strips one trailing EOS, if present.
pub fn content(tokens: &[Token]) -> &[Token] {
    match tokens.split_last() {
        Some((&EOS, rest)) => rest,
        _ => tokens,
    }
}

/// How the next token is picked.
pub enum Decoding<'r, R: Rng + ?Sized> {
    Sample(&'r mut R),
    Greedy,
}

/// Samples a summary from `policy` at temperature 1, scoring every step
/// under the frozen `reference` as well.
pub fn rollout<R: Rng + ?Sized>(
    policy: &PolicyParams,
    reference: &PolicyParams,
    doc: &Document,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    generate(policy, Some(reference), doc, cfg, Decoding::Sample(rng))
}

/// Argmax decoding, used for evaluation. Reference log-probs are filled in
/// when a reference is supplied, otherwise left empty.
pub fn decode_greedy(
    policy: &PolicyParams,
    reference: Option<&PolicyParams>,
    doc: &Document,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    generate::<rand::rngs::ThreadRng>(policy, reference, doc, cfg, Decoding::Greedy)
}

fn generate<R: Rng + ?Sized>(
    policy: &PolicyParams,
    reference: Option<&PolicyParams>,
    doc: &Document,
    cfg: &EpisodeConfig,
    mut decoding: Decoding<'_, R>,
) -> Result<Episode> {
    cfg.validate()?;
    if let Some(reference) = reference {
        if reference.shape() != policy.shape() {
            return Err(Error::config(format!(
                "policy shape {:?} differs from reference shape {:?}",
                policy.shape(),
                reference.shape()
            )));
        }
    }
    let mut ep = Episode {
        tokens: Vec::with_capacity(cfg.max_summary_len),
        logprobs_rl: Vec::new(),
        logprobs_ft: Vec::new(),
        values: Vec::new(),
        truncated: true,
    };
    for step in 0..cfg.max_summary_len {
        let out = policy.forward(&doc.tokens, &ep.tokens, cfg.max_summary_len)?;
        if out.logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite logits at step {step}"
            )));
        }
        let logp = log_softmax(&out.logits);
        let action = match &mut decoding {
            Decoding::Sample(rng) => sample_categorical(&logp, *rng),
            Decoding::Greedy => argmax(&logp),
        };
        if let Some(reference) = reference {
            let ref_out = reference.forward(&doc.tokens, &ep.tokens, cfg.max_summary_len)?;
            if ref_out.logits.iter().any(|z| !z.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite reference logits at step {step}"
                )));
            }
            ep.logprobs_ft.push(log_softmax(&ref_out.logits)[action]);
        }
        ep.logprobs_rl.push(logp[action]);
        ep.values.push(out.values);
        ep.tokens.push(action as Token);
        if action as Token == EOS {
            ep.truncated = false;
            break;
        }
    }
    Ok(ep)
}

/// Log-sum-exp stabilized log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn sample_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in logp.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
