//! Expected-BLEU objective over N-best lists and its analytic gradient.
//!
//! Loss is `-(1/N) Σ_i xBleu_i`, where `xBleu_i` is the softmax-weighted
//! sentence BLEU of sample `i`'s candidates. The gradient is assembled in two
//! phases: error terms `δ_(f,e)` are first accumulated per unique phrase pair
//! over the whole corpus, then `∂sim/∂θ` is evaluated once per unique pair
//! and scaled by its total error term.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::corpus::{LambdaVector, PhrasePair, TrainingSample, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{
    column_argmax, encode, project, vector_similarity, Arch, ForwardTrace, ModelParams, SimMode, WordVector,
};
use crate::rerank::sptm_feature;
use crate::scalar::{dot, norm, norm_inf, CompensatedSum, Scalar};

/// Pairs handled by one phase-2 work unit. Fixed so that the summation order
/// does not depend on the number of worker threads.
const PAIR_CHUNK: usize = 32;
/// Phase-2 work units evaluated before their partial sums are merged.
const CHUNK_GROUP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore<T> {
    /// `λ_1..M · h`
    pub base: T,
    /// `h_{M+1}`: summed phrase-pair similarity over the derivation.
    pub sptm: T,
    pub total: T,
    pub prob: T,
}

/// Per-sample error terms, before averaging over the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTerms<T> {
    pub deltas: BTreeMap<PhrasePair, T>,
    pub xbleu: T,
    /// `U(θ, E) = sBleu(E) - xBleu` per candidate.
    pub utilities: Vec<T>,
}

/// Dense gradient with the shapes of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator<T> {
    pub dw1: Matrix<T>,
    pub dw2: Matrix<T>,
}

impl<T: Scalar> GradientAccumulator<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            dw1: Matrix::zeros(params.w1.rows(), params.w1.cols()),
            dw2: Matrix::zeros(params.w2.rows(), params.w2.cols()),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, c: T) {
        self.dw1.add_scaled(&other.dw1, c);
        self.dw2.add_scaled(&other.dw2, c);
    }

    /// Same layout as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = self.dw1.as_slice().to_vec();
        v.extend_from_slice(self.dw2.as_slice());
        v
    }

    pub fn norm_inf(&self) -> T {
        norm_inf(self.dw1.as_slice()).max(norm_inf(self.dw2.as_slice()))
    }

    pub fn all_finite(&self) -> bool {
        self.dw1.all_finite() && self.dw2.all_finite()
    }
}

/// Result of one full objective evaluation.
#[derive(Debug, Clone)]
pub struct GradientEvaluation<T> {
    pub loss: T,
    /// Mean expected BLEU over samples.
    pub xbleu: T,
    pub grad: GradientAccumulator<T>,
    pub unique_pairs: usize,
    /// Number of `∂sim/∂θ` evaluations used to assemble `grad`.
    pub sim_gradient_calls: usize,
}

/// Softmax with max subtraction.
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z = exps.iter().copied().collect::<CompensatedSum<T>>().value();
    exps.into_iter().map(|e| e / z).collect()
}

fn expectation<T: Scalar>(probs: &[T], values: &[T]) -> T {
    probs.iter().zip(values).map(|(&p, &v)| p * v).collect::<CompensatedSum<T>>().value()
}

fn base_score<T: Scalar>(features: &[f64], lambda: &LambdaVector) -> T {
    features.iter().zip(lambda.base()).map(|(&h, &w)| T::of(w) * T::of(h)).collect::<CompensatedSum<T>>().value()
}

fn check_lambda(sample: &TrainingSample, lambda: &LambdaVector) -> Result<()> {
    lambda.check_features(sample.num_features())?;
    if let Some(c) = sample.candidates.iter().find(|c| c.features.len() != sample.num_features()) {
        return Err(Error::Dimension(format!(
            "sentence {}: candidate has {} features, expected {}",
            sample.id,
            c.features.len(),
            sample.num_features()
        )));
    }
    Ok(())
}

/// Log-linear scores and softmax probabilities of a sample's candidates.
pub fn score_candidates<T: Scalar>(
    sample: &TrainingSample,
    params: &ModelParams<T>,
    lambda: &LambdaVector,
    vocab: &Vocabulary,
) -> Result<Vec<CandidateScore<T>>> {
    check_lambda(sample, lambda)?;
    let w = T::of(lambda.sptm());
    let mut scores = Vec::with_capacity(sample.candidates.len());
    for c in &sample.candidates {
        let base: T = base_score(&c.features, lambda);
        let sptm = sptm_feature(c, params, vocab)?;
        scores.push(CandidateScore { base, sptm, total: base + w * sptm, prob: T::zero() });
    }
    let totals: Vec<T> = scores.iter().map(|s| s.total).collect();
    for (s, p) in scores.iter_mut().zip(softmax(&totals)) {
        s.prob = p;
    }
    Ok(scores)
}

/// Expected sentence BLEU of one N-best list.
pub fn expected_bleu<T: Scalar>(
    sample: &TrainingSample,
    params: &ModelParams<T>,
    lambda: &LambdaVector,
    vocab: &Vocabulary,
) -> Result<T> {
    let scores = score_candidates(sample, params, lambda, vocab)?;
    let probs: Vec<T> = scores.iter().map(|s| s.prob).collect();
    let sbleu: Vec<T> = sample.candidates.iter().map(|c| T::of(c.sbleu)).collect();
    Ok(expectation(&probs, &sbleu))
}

/// `δ_(f,e) = Σ_E U(θ,E) P(E|F) λ_{M+1} N(f,e;A)` for every pair in the list.
pub fn error_terms<T: Scalar>(
    sample: &TrainingSample,
    params: &ModelParams<T>,
    lambda: &LambdaVector,
    vocab: &Vocabulary,
) -> Result<ErrorTerms<T>> {
    let scores = score_candidates(sample, params, lambda, vocab)?;
    let probs: Vec<T> = scores.iter().map(|s| s.prob).collect();
    let sbleu: Vec<T> = sample.candidates.iter().map(|c| T::of(c.sbleu)).collect();
    let xbleu = expectation(&probs, &sbleu);
    let utilities: Vec<T> = sbleu.iter().map(|&s| s - xbleu).collect();
    let w = T::of(lambda.sptm());
    let mut deltas: BTreeMap<PhrasePair, T> = BTreeMap::new();
    for ((c, &p), &u) in sample.candidates.iter().zip(&probs).zip(&utilities) {
        for pair in &c.derivation.pairs {
            let d = deltas.entry(pair.clone()).or_insert_with(T::zero);
            *d = *d + u * p * w;
        }
    }
    Ok(ErrorTerms { deltas, xbleu, utilities })
}

/// `∂s/∂a`, `∂s/∂b` for `s = sim(a, b)`.
fn output_grads<T: Scalar>(a: &[T], b: &[T], mode: SimMode) -> (Vec<T>, Vec<T>) {
    match mode {
        SimMode::Dot => (b.to_vec(), a.to_vec()),
        SimMode::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            let n = na * nb;
            if n == T::zero() {
                return (vec![T::zero(); a.len()], vec![T::zero(); b.len()]);
            }
            let s = dot(a, b) / n;
            let ga = a.iter().zip(b).map(|(&ai, &bi)| bi / n - s * ai / (na * na)).collect();
            let gb = a.iter().zip(b).map(|(&ai, &bi)| ai / n - s * bi / (nb * nb)).collect();
            (ga, gb)
        }
    }
}

/// Accumulates `scale · (∂output/∂θ)^T dout` into `acc`.
fn backprop<T: Scalar>(
    params: &ModelParams<T>,
    x: &WordVector,
    trace: &ForwardTrace<T>,
    dout: &[T],
    scale: T,
    acc: &mut GradientAccumulator<T>,
) {
    let g1: Vec<T> = match params.arch {
        Arch::Linear => dout.iter().map(|&g| g * scale).collect(),
        Arch::Nonlinear => {
            let g2: Vec<T> =
                dout.iter().zip(&trace.y2).map(|(&g, &y)| scale * g * (T::one() - y * y)).collect();
            acc.dw2.add_outer(&trace.y1, &g2, T::one());
            let back = params.w2.mul(&g2);
            back.iter().zip(&trace.y1).map(|(&h, &y)| h * (T::one() - y * y)).collect()
        }
    };
    for &(i, c) in x.entries() {
        let c = T::of(c as f64);
        for (a, &g) in acc.dw1.row_mut(i).iter_mut().zip(&g1) {
            *a = *a + c * g;
        }
    }
}

/// A projected unit (phrase or single token) with its input vector.
struct Unit<'a, T> {
    x: &'a WordVector,
    trace: &'a ForwardTrace<T>,
}

/// Adds `scale · ∂sim(a, b)/∂θ` for two projected units.
fn accumulate_pair_gradient<T: Scalar>(
    params: &ModelParams<T>,
    a: &Unit<'_, T>,
    b: &Unit<'_, T>,
    scale: T,
    acc: &mut GradientAccumulator<T>,
) {
    let (ga, gb) = output_grads(a.trace.output(), b.trace.output(), params.sim_mode);
    backprop(params, a.x, a.trace, &ga, scale, acc);
    backprop(params, b.x, b.trace, &gb, scale, acc);
}

/// Adds `scale · ∂sim(f, e)/∂θ` where `f`, `e` are given as units: one unit
/// for phrase-level scoring, one per token position for word-level scoring.
fn accumulate_sim_gradient<T: Scalar>(
    params: &ModelParams<T>,
    f: &[Unit<'_, T>],
    e: &[Unit<'_, T>],
    scale: T,
    acc: &mut GradientAccumulator<T>,
) {
    if !params.word_level {
        accumulate_pair_gradient(params, &f[0], &e[0], scale, acc);
        return;
    }
    // subgradient of the mean-of-max: only argmax partners receive gradient
    let sims = unit_similarities(params, f, e);
    let half = T::of(0.5);
    let row_scale = scale * half / T::of_usize(f.len());
    for (u, row) in sims.iter().enumerate() {
        let v = crate::model::argmax(row);
        accumulate_pair_gradient(params, &f[u], &e[v], row_scale, acc);
    }
    let col_scale = scale * half / T::of_usize(e.len());
    for v in 0..e.len() {
        let u = column_argmax(&sims, v);
        accumulate_pair_gradient(params, &f[u], &e[v], col_scale, acc);
    }
}

fn unit_similarities<T: Scalar>(params: &ModelParams<T>, f: &[Unit<'_, T>], e: &[Unit<'_, T>]) -> Vec<Vec<T>> {
    f.iter()
        .map(|u| e.iter().map(|v| vector_similarity(u.trace.output(), v.trace.output(), params.sim_mode)).collect())
        .collect()
}

fn units_similarity<T: Scalar>(params: &ModelParams<T>, f: &[Unit<'_, T>], e: &[Unit<'_, T>]) -> T {
    if params.word_level {
        crate::model::mean_of_max(&unit_similarities(params, f, e))
    } else {
        vector_similarity(f[0].trace.output(), e[0].trace.output(), params.sim_mode)
    }
}

fn phrase_units<T: Scalar>(
    tokens: &[String],
    params: &ModelParams<T>,
    vocab: &Vocabulary,
) -> Result<(Vec<WordVector>, Vec<ForwardTrace<T>>)> {
    let xs: Vec<WordVector> = if params.word_level {
        tokens.iter().map(|t| WordVector::from_indices(vocab.len(), [vocab.index_of(t)])).collect()
    } else {
        vec![crate::model::encode_tokens(tokens, vocab)]
    };
    let traces = xs.iter().map(|x| project(x, params)).collect::<Result<Vec<_>>>()?;
    Ok((xs, traces))
}

/// `∂sim_θ(x_f, x_e)/∂θ` for one phrase pair.
pub fn sim_gradient<T: Scalar>(
    f: &crate::corpus::Phrase,
    e: &crate::corpus::Phrase,
    params: &ModelParams<T>,
    vocab: &Vocabulary,
) -> Result<GradientAccumulator<T>> {
    if params.input_dim() != vocab.len() {
        return Err(Error::Dimension(format!("W1 has {} rows, vocabulary {}", params.input_dim(), vocab.len())));
    }
    if f.is_empty() || e.is_empty() {
        return Err(Error::Empty("phrase"));
    }
    let (fx, ft) = phrase_units(&f.tokens, params, vocab)?;
    let (ex, et) = phrase_units(&e.tokens, params, vocab)?;
    let fu: Vec<Unit<'_, T>> = fx.iter().zip(&ft).map(|(x, trace)| Unit { x, trace }).collect();
    let eu: Vec<Unit<'_, T>> = ex.iter().zip(&et).map(|(x, trace)| Unit { x, trace }).collect();
    let mut acc = GradientAccumulator::zeros_like(params);
    accumulate_sim_gradient(params, &fu, &eu, T::one(), &mut acc);
    Ok(acc)
}

struct IndexedSample<T> {
    base: Vec<T>,
    sbleu: Vec<T>,
    /// Per candidate: `(pair id, occurrences in the derivation)`.
    occurrences: Vec<Vec<(usize, u32)>>,
}

/// A corpus interned for repeated evaluation at fixed λ: unique phrases,
/// unique phrase pairs and per-candidate pair counts.
pub struct Objective<T> {
    dim: usize,
    sptm_weight: T,
    weight_decay: T,
    /// Phrase bag-of-words vectors (source and target phrases).
    phrases: Vec<WordVector>,
    /// Token index lists of the same phrases, for word-level scoring.
    phrase_tokens: Vec<Vec<usize>>,
    tokens: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    pair_keys: Vec<PhrasePair>,
    samples: Vec<IndexedSample<T>>,
}

/// Projections of every unit the pairs refer to for the current θ.
struct Projections<T> {
    phrase_traces: Vec<ForwardTrace<T>>,
    token_vectors: Vec<WordVector>,
    token_traces: Vec<ForwardTrace<T>>,
    token_slot: HashMap<usize, usize>,
}

impl<T: Scalar> Objective<T> {
    pub fn new(samples: &[TrainingSample], vocab: &Vocabulary, lambda: &LambdaVector) -> Result<Self> {
        Self::with_weight_decay(samples, vocab, lambda, 0.0)
    }

    /// `weight_decay` adds `½ · wd · ‖θ‖²` to the loss.
    pub fn with_weight_decay(
        samples: &[TrainingSample],
        vocab: &Vocabulary,
        lambda: &LambdaVector,
        weight_decay: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("training samples"));
        }
        let mut phrase_ids: HashMap<crate::corpus::Phrase, usize> = HashMap::new();
        let mut phrases = Vec::new();
        let mut phrase_tokens = Vec::new();
        let mut pair_ids: HashMap<&PhrasePair, usize> = HashMap::new();
        let pair_keys: Vec<PhrasePair> =
            crate::corpus::collect_phrase_pairs(samples).into_iter().map(|p| p.pair).collect();
        let mut pairs = Vec::with_capacity(pair_keys.len());
        for (id, key) in pair_keys.iter().enumerate() {
            pair_ids.insert(key, id);
        }
        for key in &pair_keys {
            let mut intern = |p: &'_ crate::corpus::Phrase| -> usize {
                *phrase_ids.entry(p.clone()).or_insert_with(|| {
                    phrases.push(encode(p, vocab));
                    phrase_tokens.push(p.tokens.iter().map(|t| vocab.index_of(t)).collect::<Vec<_>>());
                    phrases.len() - 1
                })
            };
            let f = intern(&key.source);
            let e = intern(&key.target);
            pairs.push((f, e));
        }
        let mut tokens: Vec<usize> = phrase_tokens.iter().flatten().copied().collect();
        tokens.sort_unstable();
        tokens.dedup();

        let mut indexed = Vec::with_capacity(samples.len());
        for s in samples {
            if s.candidates.is_empty() {
                return Err(Error::Empty("candidate list"));
            }
            check_lambda(s, lambda)?;
            let base = s.candidates.iter().map(|c| base_score(&c.features, lambda)).collect();
            let sbleu = s.candidates.iter().map(|c| T::of(c.sbleu)).collect();
            let occurrences = s
                .candidates
                .iter()
                .map(|c| {
                    let mut occ: Vec<(usize, u32)> = Vec::new();
                    let mut ids: Vec<usize> = c.derivation.pairs.iter().map(|p| pair_ids[p]).collect();
                    ids.sort_unstable();
                    for id in ids {
                        match occ.last_mut() {
                            Some((j, n)) if *j == id => *n += 1,
                            _ => occ.push((id, 1)),
                        }
                    }
                    occ
                })
                .collect();
            indexed.push(IndexedSample { base, sbleu, occurrences });
        }
        Ok(Self {
            dim: vocab.len(),
            sptm_weight: T::of(lambda.sptm()),
            weight_decay: T::of(weight_decay),
            phrases,
            phrase_tokens,
            tokens,
            pairs,
            pair_keys,
            samples: indexed,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn unique_pairs(&self) -> &[PhrasePair] {
        &self.pair_keys
    }

    fn check_params(&self, params: &ModelParams<T>) -> Result<()> {
        if params.input_dim() != self.dim {
            return Err(Error::Dimension(format!("W1 has {} rows, vocabulary {}", params.input_dim(), self.dim)));
        }
        params.validate()
    }

    fn project_all(&self, params: &ModelParams<T>) -> Result<Projections<T>> {
        if params.word_level {
            let token_vectors: Vec<WordVector> =
                self.tokens.iter().map(|&t| WordVector::from_indices(self.dim, [t])).collect();
            let token_traces =
                token_vectors.par_iter().map(|x| project(x, params)).collect::<Result<Vec<_>>>()?;
            let token_slot = self.tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();
            Ok(Projections { phrase_traces: Vec::new(), token_vectors, token_traces, token_slot })
        } else {
            let phrase_traces = self.phrases.par_iter().map(|x| project(x, params)).collect::<Result<Vec<_>>>()?;
            Ok(Projections { phrase_traces, token_vectors: Vec::new(), token_traces: Vec::new(), token_slot: HashMap::new() })
        }
    }

    fn units<'a>(&'a self, proj: &'a Projections<T>, params: &ModelParams<T>, phrase: usize) -> Vec<Unit<'a, T>> {
        if params.word_level {
            self.phrase_tokens[phrase]
                .iter()
                .map(|t| {
                    let slot = proj.token_slot[t];
                    Unit { x: &proj.token_vectors[slot], trace: &proj.token_traces[slot] }
                })
                .collect()
        } else {
            vec![Unit { x: &self.phrases[phrase], trace: &proj.phrase_traces[phrase] }]
        }
    }

    fn pair_similarities(&self, proj: &Projections<T>, params: &ModelParams<T>) -> Vec<T> {
        self.pairs
            .par_iter()
            .map(|&(f, e)| units_similarity(params, &self.units(proj, params, f), &self.units(proj, params, e)))
            .collect()
    }

    /// Candidate probabilities, xBleu and utilities of one sample.
    fn sample_distribution(&self, s: &IndexedSample<T>, sims: &[T]) -> (Vec<T>, T) {
        let totals: Vec<T> = s
            .base
            .iter()
            .zip(&s.occurrences)
            .map(|(&b, occ)| {
                let h: T = occ.iter().map(|&(p, n)| T::of(n as f64) * sims[p]).collect::<CompensatedSum<T>>().value();
                b + self.sptm_weight * h
            })
            .collect();
        let probs = softmax(&totals);
        let xbleu = expectation(&probs, &s.sbleu);
        (probs, xbleu)
    }

    fn decay_term(&self, params: &ModelParams<T>) -> T {
        if self.weight_decay == T::zero() {
            return T::zero();
        }
        let sq = params.to_flat().iter().map(|&v| v * v).collect::<CompensatedSum<T>>().value();
        T::of(0.5) * self.weight_decay * sq
    }

    /// Loss and mean xBleu without the gradient.
    pub fn loss(&self, params: &ModelParams<T>) -> Result<(T, T)> {
        self.check_params(params)?;
        let proj = self.project_all(params)?;
        let sims = self.pair_similarities(&proj, params);
        let xbleus: Vec<T> = self.samples.par_iter().map(|s| self.sample_distribution(s, &sims).1).collect();
        let xbleu = xbleus.into_iter().collect::<CompensatedSum<T>>().value() / T::of_usize(self.samples.len());
        Ok((-xbleu + self.decay_term(params), xbleu))
    }

    /// Per-sample error terms keyed by pair id, sorted by id.
    fn sample_deltas(&self, s: &IndexedSample<T>, sims: &[T]) -> (T, Vec<(usize, T)>) {
        let (probs, xbleu) = self.sample_distribution(s, sims);
        let mut deltas: Vec<(usize, T)> = Vec::new();
        for ((occ, &p), &sb) in s.occurrences.iter().zip(&probs).zip(&s.sbleu) {
            let w = (sb - xbleu) * p * self.sptm_weight;
            for &(pair, n) in occ {
                deltas.push((pair, w * T::of(n as f64)));
            }
        }
        deltas.sort_by_key(|d| d.0);
        let mut merged: Vec<(usize, T)> = Vec::with_capacity(deltas.len());
        for (pair, d) in deltas {
            match merged.last_mut() {
                Some((q, acc)) if *q == pair => *acc = *acc + d,
                _ => merged.push((pair, d)),
            }
        }
        (xbleu, merged)
    }

    /// Loss, mean xBleu and the gradient via two-phase assembly.
    pub fn evaluate(&self, params: &ModelParams<T>) -> Result<GradientEvaluation<T>> {
        self.check_params(params)?;
        let proj = self.project_all(params)?;
        let sims = self.pair_similarities(&proj, params);

        // phase 1: error terms per unique pair, merged in sample order
        let per_sample: Vec<(T, Vec<(usize, T)>)> =
            self.samples.par_iter().map(|s| self.sample_deltas(s, &sims)).collect();
        let n = T::of_usize(self.samples.len());
        let mut xbleu_sum = CompensatedSum::new();
        let mut delta = vec![T::zero(); self.pairs.len()];
        for (xb, ds) in &per_sample {
            xbleu_sum.add(*xb);
            for &(p, d) in ds {
                delta[p] = delta[p] + d;
            }
        }
        let xbleu = xbleu_sum.value() / n;
        for d in &mut delta {
            *d = *d / n;
        }

        // phase 2: one ∂sim/∂θ per unique pair, scaled by -δ
        let mut grad = GradientAccumulator::zeros_like(params);
        let chunks: Vec<&[(usize, usize)]> = self.pairs.chunks(PAIR_CHUNK).collect();
        let mut calls = 0;
        for (g, group) in chunks.chunks(CHUNK_GROUP).enumerate() {
            let partials: Vec<(GradientAccumulator<T>, usize)> = group
                .par_iter()
                .enumerate()
                .map(|(c, chunk)| {
                    let first = (g * CHUNK_GROUP + c) * PAIR_CHUNK;
                    let mut acc = GradientAccumulator::zeros_like(params);
                    for (k, &(f, e)) in chunk.iter().enumerate() {
                        let fu = self.units(&proj, params, f);
                        let eu = self.units(&proj, params, e);
                        accumulate_sim_gradient(params, &fu, &eu, -delta[first + k], &mut acc);
                    }
                    (acc, chunk.len())
                })
                .collect();
            for (acc, count) in partials {
                grad.add_scaled(&acc, T::one());
                calls += count;
            }
        }
        if self.weight_decay != T::zero() {
            grad.dw1.add_scaled(&params.w1, self.weight_decay);
            grad.dw2.add_scaled(&params.w2, self.weight_decay);
        }
        Ok(GradientEvaluation {
            loss: -xbleu + self.decay_term(params),
            xbleu,
            grad,
            unique_pairs: self.pairs.len(),
            sim_gradient_calls: calls,
        })
    }
}

/// Corpus loss `-mean xBleu` and its gradient.
pub fn full_gradient<T: Scalar>(
    samples: &[TrainingSample],
    params: &ModelParams<T>,
    lambda: &LambdaVector,
    vocab: &Vocabulary,
) -> Result<GradientEvaluation<T>> {
    Objective::new(samples, vocab, lambda)?.evaluate(params)
}

/// The same gradient summed naively: one `∂sim/∂θ` per phrase-pair
/// occurrence in every derivation of every candidate.
pub fn full_gradient_naive<T: Scalar>(
    samples: &[TrainingSample],
    params: &ModelParams<T>,
    lambda: &LambdaVector,
    vocab: &Vocabulary,
) -> Result<GradientEvaluation<T>> {
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    let n = T::of_usize(samples.len());
    let w = T::of(lambda.sptm());
    let mut grad = GradientAccumulator::zeros_like(params);
    let mut xbleu = CompensatedSum::new();
    let mut calls = 0;
    for s in samples {
        let scores = score_candidates(s, params, lambda, vocab)?;
        let xb = expectation(
            &scores.iter().map(|c| c.prob).collect::<Vec<_>>(),
            &s.candidates.iter().map(|c| T::of(c.sbleu)).collect::<Vec<_>>(),
        );
        xbleu.add(xb);
        for (c, sc) in s.candidates.iter().zip(&scores) {
            let weight = (T::of(c.sbleu) - xb) * sc.prob * w / n;
            for pair in &c.derivation.pairs {
                let g = sim_gradient(&pair.source, &pair.target, params, vocab)?;
                grad.add_scaled(&g, -weight);
                calls += 1;
            }
        }
    }
    let xbleu = xbleu.value() / n;
    Ok(GradientEvaluation {
        loss: -xbleu,
        xbleu,
        grad,
        unique_pairs: crate::corpus::collect_phrase_pairs(samples).len(),
        sim_gradient_calls: calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Derivation, NBestEntry, Phrase};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cand(pairs: &[(&str, &str)], feats: Vec<f64>, sbleu: f64) -> NBestEntry {
        let derivation = Derivation::new(pairs.iter().map(|(f, e)| PhrasePair::new(&[*f], &[*e])).collect());
        let tokens = derivation.target_tokens().map(String::from).collect();
        NBestEntry { tokens, features: feats, derivation, sbleu }
    }

    fn setup() -> (Vocabulary, ModelParams<f64>) {
        let vocab = Vocabulary::from_tokens(["f1", "f2", "e1", "e2", "e3"]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::random(vocab.len(), 3, 2, Arch::Nonlinear, SimMode::Dot, false, &mut rng);
        (vocab, p)
    }

    #[test]
    fn uniform_scores_give_uniform_probabilities() {
        assert_eq!(softmax(&[2.0f64; 4]), vec![0.25; 4]);
    }

    #[test]
    fn single_candidate_has_zero_error_terms() {
        let (vocab, p) = setup();
        let s = TrainingSample {
            id: 0,
            source: vec![],
            reference: vec!["e1".into()],
            candidates: vec![cand(&[("f1", "e1")], vec![0.3], 0.7)],
        };
        let lambda = LambdaVector::new(vec![1.0, 1.0]);
        let et = error_terms(&s, &p, &lambda, &vocab).unwrap();
        assert_eq!(et.xbleu, 0.7);
        assert!(et.deltas.values().all(|&d| d == 0.0));
        assert_eq!(expected_bleu(&s, &p, &lambda, &vocab).unwrap(), 0.7);
    }

    #[test]
    fn lambda_length_is_checked() {
        let (vocab, p) = setup();
        let s = TrainingSample {
            id: 0,
            source: vec![],
            reference: vec!["e1".into()],
            candidates: vec![cand(&[("f1", "e1")], vec![0.3, 0.1], 0.7)],
        };
        let err = score_candidates(&s, &p, &LambdaVector::new(vec![1.0, 1.0]), &vocab).unwrap_err();
        assert!(matches!(err, Error::LambdaLength { expected: 3, found: 2 }));
    }

    #[test]
    fn zero_w1_gives_zero_w2_gradient() {
        let (vocab, mut p) = setup();
        p.w1.scale(0.0);
        let g = sim_gradient(&Phrase::source(&["f1"]), &Phrase::target(&["e2"]), &p, &vocab).unwrap();
        assert!(g.dw2.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_pair_gradient_is_twice_one_side() {
        let (vocab, p) = setup();
        let f = Phrase::source(&["f1", "e2"]);
        let g = sim_gradient(&f, &Phrase::target(&["f1", "e2"]), &p, &vocab).unwrap();
        let (xs, ts) = phrase_units(&f.tokens, &p, &vocab).unwrap();
        let unit = Unit { x: &xs[0], trace: &ts[0] };
        let mut one = GradientAccumulator::zeros_like(&p);
        let y = unit.trace.output().to_vec();
        backprop(&p, unit.x, unit.trace, &y, 1.0, &mut one);
        for (a, b) in g.to_flat().iter().zip(one.to_flat()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn evaluation_counts_one_call_per_unique_pair() {
        let (vocab, p) = setup();
        let s = TrainingSample {
            id: 0,
            source: vec![],
            reference: vec!["e1".into()],
            candidates: vec![
                cand(&[("f1", "e1"), ("f1", "e1")], vec![0.1], 0.9),
                cand(&[("f1", "e2"), ("f2", "e3")], vec![0.4], 0.2),
            ],
        };
        let lambda = LambdaVector::new(vec![1.0, 1.0]);
        let ev = full_gradient(std::slice::from_ref(&s), &p, &lambda, &vocab).unwrap();
        assert_eq!(ev.unique_pairs, 3);
        assert_eq!(ev.sim_gradient_calls, 3);
        let naive = full_gradient_naive(&[s], &p, &lambda, &vocab).unwrap();
        assert_eq!(naive.sim_gradient_calls, 4);
        for (a, b) in ev.grad.to_flat().iter().zip(naive.grad.to_flat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
