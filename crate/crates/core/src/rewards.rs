//! Programmatic summary-quality scorers. All scores lie in `[0, 1]`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::toyenv::{content, Document, Token};

/// Quality dimensions, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Coherence,
    Consistency,
    Fluency,
    Relevance,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Coherence,
        Dimension::Consistency,
        Dimension::Fluency,
        Dimension::Relevance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Coherence => "coherence",
            Dimension::Consistency => "consistency",
            Dimension::Fluency => "fluency",
            Dimension::Relevance => "relevance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimScores {
    pub coherence: f64,
    pub consistency: f64,
    pub fluency: f64,
    pub relevance: f64,
}

impl DimScores {
    pub fn new(coherence: f64, consistency: f64, fluency: f64, relevance: f64) -> Self {
        DimScores {
            coherence,
            consistency,
            fluency,
            relevance,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [
            self.coherence,
            self.consistency,
            self.fluency,
            self.relevance,
        ]
    }

    pub fn get(&self, dim: Dimension) -> f64 {
        self.to_array()[dim.index()]
    }

    pub fn mean(&self) -> f64 {
        self.to_array().iter().sum::<f64>() / 4.0
    }
}

/// Fluency multiplier for a summary that never emitted EOS.
pub const TRUNCATION_FACTOR: f64 = 0.5;

/// Scores a content summary (EOS already stripped).
pub fn score_dimensions(doc: &Document, summary: &[Token], emitted_eos: bool) -> DimScores {
    DimScores {
        coherence: coherence(doc, summary),
        consistency: consistency(doc, summary),
        fluency: fluency(summary, emitted_eos),
        relevance: relevance(doc, summary),
    }
}

/// Scores a raw emitted sequence; a trailing EOS counts as termination.
pub fn score_tokens(doc: &Document, tokens: &[Token]) -> DimScores {
    let body = content(tokens);
    score_dimensions(doc, body, body.len() < tokens.len())
}

/// Fraction of summary tokens found in the document; 1 for an empty summary.
pub fn consistency(doc: &Document, summary: &[Token]) -> f64 {
    if summary.is_empty() {
        return 1.0;
    }
    let present: HashSet<Token> = doc.tokens.iter().copied().collect();
    summary.iter().filter(|t| present.contains(t)).count() as f64 / summary.len() as f64
}

/// Fraction of the document's salient tokens that appear anywhere in the summary.
pub fn relevance(doc: &Document, summary: &[Token]) -> f64 {
    let said: HashSet<Token> = summary.iter().copied().collect();
    let hits = doc
        .salient_order
        .iter()
        .filter(|s| said.contains(s))
        .count();
    hits as f64 / doc.salient_order.len() as f64
}

/// Among summary tokens that occur in the document, the fraction of adjacent
/// pairs whose first-occurrence positions are non-decreasing.
pub fn coherence(doc: &Document, summary: &[Token]) -> f64 {
    let positions: Vec<usize> = summary
        .iter()
        .filter_map(|&t| doc.first_position(t))
        .collect();
    if positions.len() < 2 {
        return 1.0;
    }
    let ordered = positions.windows(2).filter(|w| w[0] <= w[1]).count();
    ordered as f64 / (positions.len() - 1) as f64
}

/// `(1 − immediate repeat fraction) × eos factor`.
pub fn fluency(summary: &[Token], emitted_eos: bool) -> f64 {
    let repeats = summary.windows(2).filter(|w| w[0] == w[1]).count();
    let denom = summary.len().saturating_sub(1).max(1);
    let eos_factor = if emitted_eos { 1.0 } else { TRUNCATION_FACTOR };
    (1.0 - repeats as f64 / denom as f64) * eos_factor
}

/// Mechanical faithfulness: fraction of summary tokens present in the document.
pub fn coverage(doc: &Document, summary: &[Token]) -> f64 {
    consistency(doc, summary)
}

/// Content length, excluding a trailing EOS.
pub fn summary_length(tokens: &[Token]) -> usize {
    content(tokens).len()
}

/// Maps a finished episode to one terminal reward per value channel.
pub trait RewardModel: Sync {
    fn channels(&self) -> usize;
    fn score(&self, doc: &Document, summary: &[Token], emitted_eos: bool) -> Vec<f64>;
}

/// The four quality dimensions as reward channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct DimensionScorer;

impl RewardModel for DimensionScorer {
    fn channels(&self) -> usize {
        4
    }

    fn score(&self, doc: &Document, summary: &[Token], emitted_eos: bool) -> Vec<f64> {
        score_dimensions(doc, summary, emitted_eos)
            .to_array()
            .to_vec()
    }
}
