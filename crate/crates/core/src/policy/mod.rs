//! A small stochastic policy with a shared trunk, a vocabulary logits head,
//! and a multi-channel value head.
//!
//! The state fed to the trunk is
//! `[mean doc embedding; mean embedding of the last few emitted tokens; progress]`,
//! followed by two `tanh` layers. Gradients are exact reverse-mode
//! derivatives written out by hand for this fixed architecture: callers supply
//! the derivative of their loss with respect to each visited state's logits
//! and values, and [`PolicyParams::gradient`] pulls it back to the flat
//! parameter vector.

mod optim;
mod pretrain;

pub use optim::{
    clip_grad_norm, optimizer_step, OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use pretrain::{
    cross_entropy, supervised_pretrain, teacher_forced_loss, PretrainConfig, PretrainReport,
};

use std::hash::{Hash, Hasher};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};
use crate::toyenv::{Token, BOS};
use crate::{Error, Result};

/// Width of both trunk layers.
pub const HIDDEN: usize = 64;
/// Number of trailing emitted tokens averaged into the decoder context.
pub const CONTEXT_WINDOW: usize = 4;
/// Parameters start uniform in `[-INIT_SCALE, INIT_SCALE]`.
pub const INIT_SCALE: f64 = 0.08;

const STATES_PER_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyShape {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Value-head channels, one per reward dimension.
    pub channels: usize,
}

impl PolicyShape {
    pub fn new(vocab_size: usize, embed_dim: usize, channels: usize) -> Self {
        PolicyShape {
            vocab_size,
            embed_dim,
            channels,
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.embed_dim + 1
    }

    pub fn num_params(&self) -> usize {
        self.layout().end
    }

    fn layout(&self) -> Layout {
        let (v, d, f, h, m) = (
            self.vocab_size,
            self.embed_dim,
            self.input_dim(),
            HIDDEN,
            self.channels,
        );
        let emb = 0;
        let w1 = emb + v * d;
        let b1 = w1 + h * f;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wl = b2 + h;
        let bl = wl + v * h;
        let wv = bl + v;
        let bv = wv + m * h;
        let end = bv + m;
        Layout {
            emb,
            w1,
            b1,
            w2,
            b2,
            wl,
            bl,
            wv,
            bv,
            end,
        }
    }
}

/// Offsets of each block in the flat vector. Matrices are row-major with
/// one row per output unit.
#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wl: usize,
    bl: usize,
    wv: usize,
    bv: usize,
    end: usize,
}

/// Flat derivative over [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &GradientVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|a| *a *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }
}

impl std::ops::AddAssign<&GradientVector> for GradientVector {
    fn add_assign(&mut self, rhs: &GradientVector) {
        for (a, b) in self.0.iter_mut().zip(&rhs.0) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    flat: Vec<f64>,
}

/// One state to evaluate: the source document and the tokens emitted so far.
#[derive(Debug, Clone, Copy)]
pub struct StateInput<'a> {
    pub doc: &'a [Token],
    pub prefix: &'a [Token],
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub features: Vec<f64>,
    pub hidden1: Vec<f64>,
    pub hidden2: Vec<f64>,
    pub logits: Vec<f64>,
    pub values: Vec<f64>,
}

/// A per-state loss term and its derivative with respect to that state's
/// logits and values.
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub loss: f64,
    pub d_logits: Vec<f64>,
    pub d_values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        PolicyParams {
            shape,
            flat: vec![0.0; shape.num_params()],
        }
    }

    /// Uniform `[-INIT_SCALE, INIT_SCALE]` initialization.
    pub fn init(shape: PolicyShape, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let flat = (0..shape.num_params())
            .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        PolicyParams { shape, flat }
    }

    pub fn from_flat(shape: PolicyShape, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != shape.num_params() {
            return Err(Error::config(format!(
                "flat parameter length {} does not match shape {:?} ({} parameters)",
                flat.len(),
                shape,
                shape.num_params()
            )));
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("non-finite parameter"));
        }
        Ok(PolicyParams { shape, flat })
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn logits_bias_mut(&mut self) -> &mut [f64] {
        let l = self.shape.layout();
        &mut self.flat[l.bl..l.wv]
    }

    pub fn value_bias_mut(&mut self) -> &mut [f64] {
        let l = self.shape.layout();
        &mut self.flat[l.bv..l.end]
    }

    /// Hash of the exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.shape.hash(&mut h);
        for x in &self.flat {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens
            .iter()
            .find(|&&t| t as usize >= self.shape.vocab_size)
        {
            Some(t) => Err(Error::config(format!(
                "token {t} outside vocabulary of size {}",
                self.shape.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Logits and values for one state.
    pub fn forward(
        &self,
        doc: &[Token],
        prefix: &[Token],
        max_summary_len: usize,
    ) -> Result<Activations> {
        self.check_tokens(doc)?;
        self.check_tokens(prefix)?;
        if max_summary_len == 0 {
            return Err(Error::config("max_summary_len must be positive"));
        }
        Ok(self.forward_unchecked(StateInput { doc, prefix }, max_summary_len))
    }

    fn forward_unchecked(&self, state: StateInput<'_>, max_len: usize) -> Activations {
        let PolicyShape {
            vocab_size: v,
            embed_dim: d,
            channels: m,
        } = self.shape;
        let f = self.shape.input_dim();
        let l = self.shape.layout();
        let p = &self.flat;

        let mut features = vec![0.0; f];
        if !state.doc.is_empty() {
            let inv = 1.0 / state.doc.len() as f64;
            for &t in state.doc {
                let row = &p[l.emb + t as usize * d..][..d];
                for (x, e) in features[..d].iter_mut().zip(row) {
                    *x += e * inv;
                }
            }
        }
        let ctx = context_tokens(state.prefix);
        let inv = 1.0 / ctx.len() as f64;
        for &t in ctx {
            let row = &p[l.emb + t as usize * d..][..d];
            for (x, e) in features[d..2 * d].iter_mut().zip(row) {
                *x += e * inv;
            }
        }
        features[2 * d] = state.prefix.len() as f64 / max_len as f64;

        let hidden1 = affine_tanh(&p[l.w1..l.b1], &p[l.b1..l.w2], &features);
        let hidden2 = affine_tanh(&p[l.w2..l.b2], &p[l.b2..l.wl], &hidden1);
        let logits = affine(&p[l.wl..l.bl], &p[l.bl..l.wv], &hidden2);
        let values = affine(&p[l.wv..l.bv], &p[l.bv..l.end], &hidden2);
        debug_assert_eq!(logits.len(), v);
        debug_assert_eq!(values.len(), m);
        Activations {
            features,
            hidden1,
            hidden2,
            logits,
            values,
        }
    }

    /// Accumulates into `grad` the pullback of `(d_logits, d_values)` at one state.
    fn backward(
        &self,
        state: StateInput<'_>,
        act: &Activations,
        d_logits: &[f64],
        d_values: &[f64],
        grad: &mut [f64],
    ) {
        let d = self.shape.embed_dim;
        let f = self.shape.input_dim();
        let l = self.shape.layout();
        let p = &self.flat;

        // Heads.
        let mut d_h2 = vec![0.0; HIDDEN];
        for (k, &dz) in d_logits.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            let row = &p[l.wl + k * HIDDEN..][..HIDDEN];
            let g_row = &mut grad[l.wl + k * HIDDEN..][..HIDDEN];
            for j in 0..HIDDEN {
                g_row[j] += dz * act.hidden2[j];
                d_h2[j] += dz * row[j];
            }
            grad[l.bl + k] += dz;
        }
        for (k, &dv) in d_values.iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            let row = &p[l.wv + k * HIDDEN..][..HIDDEN];
            let g_row = &mut grad[l.wv + k * HIDDEN..][..HIDDEN];
            for j in 0..HIDDEN {
                g_row[j] += dv * act.hidden2[j];
                d_h2[j] += dv * row[j];
            }
            grad[l.bv + k] += dv;
        }

        // Second trunk layer.
        let d_a2: Vec<f64> = d_h2
            .iter()
            .zip(&act.hidden2)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let mut d_h1 = vec![0.0; HIDDEN];
        for (i, &da) in d_a2.iter().enumerate() {
            let row = &p[l.w2 + i * HIDDEN..][..HIDDEN];
            let g_row = &mut grad[l.w2 + i * HIDDEN..][..HIDDEN];
            for j in 0..HIDDEN {
                g_row[j] += da * act.hidden1[j];
                d_h1[j] += da * row[j];
            }
            grad[l.b2 + i] += da;
        }

        // First trunk layer.
        let d_a1: Vec<f64> = d_h1
            .iter()
            .zip(&act.hidden1)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let mut d_x = vec![0.0; f];
        for (i, &da) in d_a1.iter().enumerate() {
            let row = &p[l.w1 + i * f..][..f];
            let g_row = &mut grad[l.w1 + i * f..][..f];
            for j in 0..f {
                g_row[j] += da * act.features[j];
                d_x[j] += da * row[j];
            }
            grad[l.b1 + i] += da;
        }

        // Embeddings, through the two means.
        if !state.doc.is_empty() {
            let inv = 1.0 / state.doc.len() as f64;
            for &t in state.doc {
                let g_row = &mut grad[l.emb + t as usize * d..][..d];
                for (g, dx) in g_row.iter_mut().zip(&d_x[..d]) {
                    *g += dx * inv;
                }
            }
        }
        let ctx = context_tokens(state.prefix);
        let inv = 1.0 / ctx.len() as f64;
        for &t in ctx {
            let g_row = &mut grad[l.emb + t as usize * d..][..d];
            for (g, dx) in g_row.iter_mut().zip(&d_x[d..2 * d]) {
                *g += dx * inv;
            }
        }
    }

    /// Gradient of `Σ_s loss_s(logits_s, values_s)` over `states`.
    ///
    /// `head` receives the state index and its activations and returns the
    /// loss term with its derivatives. States are processed in fixed-size
    /// chunks and the partial sums are added in chunk order, so the result
    /// does not depend on thread scheduling.
    pub fn gradient<F>(
        &self,
        states: &[StateInput<'_>],
        max_summary_len: usize,
        head: F,
    ) -> Result<(f64, GradientVector)>
    where
        F: Fn(usize, &Activations) -> Result<HeadGrad> + Sync,
    {
        for s in states {
            self.check_tokens(s.doc)?;
            self.check_tokens(s.prefix)?;
        }
        if max_summary_len == 0 {
            return Err(Error::config("max_summary_len must be positive"));
        }
        let n = self.len();
        let partials: Vec<Result<(f64, Vec<f64>)>> = states
            .par_chunks(STATES_PER_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut grad = vec![0.0; n];
                let mut loss = 0.0;
                for (i, &state) in chunk.iter().enumerate() {
                    let act = self.forward_unchecked(state, max_summary_len);
                    let hg = head(c * STATES_PER_CHUNK + i, &act)?;
                    if hg.d_logits.len() != self.shape.vocab_size
                        || hg.d_values.len() != self.shape.channels
                    {
                        return Err(Error::config("head gradient has the wrong arity"));
                    }
                    loss += hg.loss;
                    self.backward(state, &act, &hg.d_logits, &hg.d_values, &mut grad);
                }
                Ok((loss, grad))
            })
            .collect();

        let mut total = 0.0;
        let mut grad = GradientVector::zeros(n);
        for part in partials {
            let (loss, g) = part?;
            total += loss;
            for (a, b) in grad.0.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if !total.is_finite() {
            return Err(Error::numerical(format!("non-finite loss {total}")));
        }
        if !grad.is_finite() {
            return Err(Error::numerical("non-finite gradient entry"));
        }
        Ok((total, grad))
    }
}

fn context_tokens(prefix: &[Token]) -> &[Token] {
    const BOS_ONLY: &[Token] = &[BOS];
    if prefix.is_empty() {
        BOS_ONLY
    } else {
        &prefix[prefix.len().saturating_sub(CONTEXT_WINDOW)..]
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(i, bi)| {
            bi + w[i * n..][..n]
                .iter()
                .zip(x)
                .map(|(a, c)| a * c)
                .sum::<f64>()
        })
        .collect()
}

fn affine_tanh(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = affine(w, b, x);
    out.iter_mut().for_each(|z| *z = z.tanh());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyenv::{generate_document, log_softmax, Vocabulary};

    fn shape() -> PolicyShape {
        PolicyShape::new(64, 32, 4)
    }

    #[test]
    fn parameter_count_matches_blocks() {
        let s = shape();
        let expected = 64 * 32 + (64 * 65 + 64) + (64 * 64 + 64) + (64 * 64 + 64) + (4 * 64 + 4);
        assert_eq!(s.num_params(), expected);
        assert_eq!(PolicyParams::init(s, 0).len(), expected);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = PolicyParams::init(shape(), 4);
        assert!(a.flat().iter().all(|x| x.abs() <= INIT_SCALE));
        assert_eq!(a, PolicyParams::init(shape(), 4));
        assert_ne!(a, PolicyParams::init(shape(), 5));
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let p = PolicyParams::zeros(shape());
        let doc = generate_document(&Vocabulary::default(), 1).unwrap();
        let out = p.forward(&doc.tokens, &[5, 6], 16).unwrap();
        assert_eq!(out.logits.len(), 64);
        assert_eq!(out.values.len(), 4);
        assert!(out.logits.iter().all(|&z| z == 0.0));
        assert!(out.values.iter().all(|&v| v == 0.0));
        let lp = log_softmax(&out.logits);
        assert!(lp.iter().all(|&x| (x + (64f64).ln()).abs() < 1e-15));
    }

    #[test]
    fn out_of_range_tokens_rejected() {
        let p = PolicyParams::zeros(shape());
        assert!(matches!(p.forward(&[70], &[], 16), Err(Error::Config(_))));
        assert!(matches!(p.forward(&[20], &[64], 16), Err(Error::Config(_))));
        assert!(PolicyParams::from_flat(shape(), vec![0.0; 3]).is_err());
    }

    /// Interval bound: |h2| ≤ 1 elementwise, so every logit is bounded by
    /// `|b_k| + Σ_j |W_kj|`.
    #[test]
    fn logits_respect_layer_norm_bound() {
        let s = shape();
        let mut rng = rng::stream(3, Purpose::Test, 0);
        let flat: Vec<f64> = (0..s.num_params())
            .map(|_| rng.random_range(-0.1..=0.1))
            .collect();
        let p = PolicyParams::from_flat(s, flat).unwrap();
        let l = s.layout();
        let bound: Vec<f64> = (0..s.vocab_size)
            .map(|k| {
                p.flat[l.bl + k].abs()
                    + p.flat[l.wl + k * HIDDEN..][..HIDDEN]
                        .iter()
                        .map(|w| w.abs())
                        .sum::<f64>()
            })
            .collect();
        for seed in 0..20 {
            let doc = generate_document(&Vocabulary::default(), seed).unwrap();
            let out = p.forward(&doc.tokens, &doc.salient_order, 16).unwrap();
            for (z, b) in out.logits.iter().zip(&bound) {
                assert!(z.is_finite() && z.abs() <= *b);
            }
            assert!(out.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn softmax_normalizes() {
        let p = PolicyParams::init(shape(), 9);
        let doc = generate_document(&Vocabulary::default(), 2).unwrap();
        let out = p.forward(&doc.tokens, &[], 16).unwrap();
        let total: f64 = log_softmax(&out.logits).iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() <= 1e-12);
        let extreme: Vec<f64> = (0..64)
            .map(|i| if i == 0 { 700.0 } else { -700.0 })
            .collect();
        let total: f64 = log_softmax(&extreme).iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    fn toy_states(doc: &[Token]) -> Vec<StateInput<'_>> {
        const PREFIXES: [&[Token]; 4] = [&[], &[5], &[5, 40, 7], &[5, 40, 7, 9, 9, 30]];
        PREFIXES
            .iter()
            .map(|p| StateInput { doc, prefix: p })
            .collect()
    }

    /// Smooth test loss: Σ_k a_k z_k² / 2 + Σ_c b_c v_c.
    fn quadratic_head(scale: f64) -> impl Fn(usize, &Activations) -> Result<HeadGrad> + Sync {
        move |i, act| {
            let a = |k: usize| scale * ((k + i) % 5) as f64 * 0.1;
            let loss = act
                .logits
                .iter()
                .enumerate()
                .map(|(k, z)| a(k) * z * z / 2.0)
                .sum::<f64>()
                + act
                    .values
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (c as f64 - 1.5) * v)
                    .sum::<f64>();
            Ok(HeadGrad {
                loss,
                d_logits: act
                    .logits
                    .iter()
                    .enumerate()
                    .map(|(k, z)| a(k) * z)
                    .collect(),
                d_values: (0..act.values.len()).map(|c| c as f64 - 1.5).collect(),
            })
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = PolicyParams::init(shape(), 1);
        let doc = generate_document(&Vocabulary::default(), 1).unwrap();
        let (loss, g) = p
            .gradient(&toy_states(&doc.tokens), 16, |_, _| {
                Ok(HeadGrad {
                    loss: 3.0,
                    d_logits: vec![0.0; 64],
                    d_values: vec![0.0; 4],
                })
            })
            .unwrap();
        assert_eq!(loss, 12.0);
        assert!(g.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let p = PolicyParams::init(shape(), 2);
        let doc = generate_document(&Vocabulary::default(), 2).unwrap();
        let states = toy_states(&doc.tokens);
        let (_, g1) = p.gradient(&states, 16, quadratic_head(1.0)).unwrap();
        let ce = |i: usize, act: &Activations| -> Result<HeadGrad> {
            let lp = log_softmax(&act.logits);
            let target = (i * 7) % 64;
            let mut d = lp.iter().map(|x| x.exp()).collect::<Vec<_>>();
            d[target] -= 1.0;
            Ok(HeadGrad {
                loss: -lp[target],
                d_logits: d,
                d_values: vec![0.0; 4],
            })
        };
        let (_, g2) = p.gradient(&states, 16, ce).unwrap();
        let (a, b) = (0.7, -1.3);
        let q = quadratic_head(1.0);
        let (_, combined) = p
            .gradient(&states, 16, |i, act| {
                let h1 = q(i, act)?;
                let h2 = ce(i, act)?;
                Ok(HeadGrad {
                    loss: a * h1.loss + b * h2.loss,
                    d_logits: h1
                        .d_logits
                        .iter()
                        .zip(&h2.d_logits)
                        .map(|(x, y)| a * x + b * y)
                        .collect(),
                    d_values: h1
                        .d_values
                        .iter()
                        .zip(&h2.d_values)
                        .map(|(x, y)| a * x + b * y)
                        .collect(),
                })
            })
            .unwrap();
        for i in 0..combined.len() {
            let expect = a * g1.0[i] + b * g2.0[i];
            assert!((combined.0[i] - expect).abs() <= 1e-10, "coord {i}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = shape();
        let p = PolicyParams::init(s, 3);
        let doc = generate_document(&Vocabulary::default(), 3).unwrap();
        let states = toy_states(&doc.tokens);
        let head = quadratic_head(1.0);
        let (_, g) = p.gradient(&states, 16, &head).unwrap();
        let loss_at = |flat: Vec<f64>| {
            let q = PolicyParams::from_flat(s, flat).unwrap();
            states
                .iter()
                .enumerate()
                .map(|(i, st)| {
                    head(i, &q.forward(st.doc, st.prefix, 16).unwrap())
                        .unwrap()
                        .loss
                })
                .sum::<f64>()
        };
        let mut rng = rng::stream(0, Purpose::Test, 3);
        let h = 1e-5;
        for _ in 0..32 {
            let i = rng.random_range(0..s.num_params());
            let mut plus = p.flat().to_vec();
            plus[i] += h;
            let mut minus = p.flat().to_vec();
            minus[i] -= h;
            let fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
            let denom = g.0[i].abs().max(fd.abs());
            if denom > 1e-9 {
                assert!(
                    (g.0[i] - fd).abs() / denom <= 1e-4,
                    "coord {i}: {} vs {fd}",
                    g.0[i]
                );
            } else {
                assert!((g.0[i] - fd).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn forward_and_gradient_are_pure() {
        let p = PolicyParams::init(shape(), 8);
        let doc = generate_document(&Vocabulary::default(), 8).unwrap();
        let states = toy_states(&doc.tokens);
        let a = p.gradient(&states, 16, quadratic_head(2.0)).unwrap();
        let b = p.gradient(&states, 16, quadratic_head(2.0)).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
        let fa = p.forward(&doc.tokens, &[3], 16).unwrap();
        let fb = p.forward(&doc.tokens, &[3], 16).unwrap();
        assert_eq!(fa.logits, fb.logits);
    }

    #[test]
    fn non_finite_head_is_reported() {
        let p = PolicyParams::init(shape(), 1);
        let doc = generate_document(&Vocabulary::default(), 1).unwrap();
        let r = p.gradient(&toy_states(&doc.tokens), 16, |_, _| {
            Ok(HeadGrad {
                loss: f64::NAN,
                d_logits: vec![0.0; 64],
                d_values: vec![0.0; 4],
            })
        });
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
