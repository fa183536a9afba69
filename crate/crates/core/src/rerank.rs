//! N-best reranking with the phrase-similarity feature added to the
//! log-linear model.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::bleu::BleuStats;
use crate::corpus::{LambdaVector, NBestEntry, PhrasePair, TrainingSample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{similarity, ModelParams};
use crate::scalar::Scalar;

/// `h_{M+1}`: similarity summed over the derivation's phrase pairs.
pub fn sptm_feature<T: Scalar>(entry: &NBestEntry, params: &ModelParams<T>, vocab: &Vocabulary) -> Result<T> {
    let mut h = T::zero();
    for p in &entry.derivation.pairs {
        h = h + similarity(&p.source, &p.target, params, vocab)?;
    }
    Ok(h)
}

/// Full feature vectors `h_1 .. h_M, h_{M+1}` for every candidate of every
/// sample. Pair similarities are computed once per distinct pair.
pub fn feature_table<T: Scalar>(
    samples: &[TrainingSample],
    params: &ModelParams<T>,
    vocab: &Vocabulary,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut unique: Vec<&PhrasePair> = samples
        .iter()
        .flat_map(|s| &s.candidates)
        .flat_map(|c| &c.derivation.pairs)
        .collect();
    unique.sort();
    unique.dedup();
    let sims = unique
        .par_iter()
        .map(|p| similarity(&p.source, &p.target, params, vocab))
        .collect::<Result<Vec<T>>>()?;
    let sim_of: HashMap<&PhrasePair, T> = unique.into_iter().zip(sims).collect();
    Ok(samples
        .iter()
        .map(|s| {
            s.candidates
                .iter()
                .map(|c| {
                    let h = c.derivation.pairs.iter().fold(T::zero(), |acc, p| acc + sim_of[p]);
                    let mut v = c.features.clone();
                    v.push(h.as_f64());
                    v
                })
                .collect()
        })
        .collect())
}

/// `λ · h`
pub fn score(features: &[f64], lambda: &[f64]) -> f64 {
    features.iter().zip(lambda).map(|(h, w)| h * w).sum()
}

/// Highest-scoring candidate; ties go to the lowest index.
pub fn select(candidates: &[Vec<f64>], lambda: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, h) in candidates.iter().enumerate() {
        let s = score(h, lambda);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Per-candidate BLEU statistics, for fast corpus BLEU of any selection.
pub fn candidate_stats(samples: &[TrainingSample]) -> Vec<Vec<BleuStats>> {
    samples
        .iter()
        .map(|s| s.candidates.iter().map(|c| BleuStats::from_pair(&s.reference, &c.tokens)).collect())
        .collect()
}

pub fn selection_bleu(stats: &[Vec<BleuStats>], choice: &[usize]) -> f64 {
    let mut total = BleuStats::default();
    for (s, &i) in stats.iter().zip(choice) {
        total.merge(&s[i]);
    }
    total.score()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub id: u64,
    pub index: usize,
    pub score: f64,
    /// `h_{M+1}` of the chosen candidate.
    pub sptm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankResult {
    pub selections: Vec<Selection>,
    pub bleu: f64,
    /// Selection with `λ_{M+1} = 0`.
    pub baseline: Vec<usize>,
    pub baseline_bleu: f64,
    /// Corpus BLEU of the per-sentence best / worst candidates by sentence
    /// BLEU; bounds on what any reranker over these lists can reach.
    pub oracle_bleu: f64,
    pub oracle_worst_bleu: f64,
}

impl RerankResult {
    pub fn chosen(&self) -> Vec<usize> {
        self.selections.iter().map(|s| s.index).collect()
    }
}

fn oracle_choice(samples: &[TrainingSample], best: bool) -> Vec<usize> {
    samples
        .iter()
        .map(|s| {
            let mut pick = 0;
            for (i, c) in s.candidates.iter().enumerate() {
                let better = if best { c.sbleu > s.candidates[pick].sbleu } else { c.sbleu < s.candidates[pick].sbleu };
                if better {
                    pick = i;
                }
            }
            pick
        })
        .collect()
}

/// Reranks with precomputed feature vectors.
pub fn rerank_features(
    samples: &[TrainingSample],
    features: &[Vec<Vec<f64>>],
    lambda: &LambdaVector,
) -> Result<RerankResult> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    for s in samples {
        lambda.check_features(s.num_features())?;
    }
    let stats = candidate_stats(samples);
    let base_lambda = lambda.with_sptm(0.0);
    let selections: Vec<Selection> = samples
        .iter()
        .zip(features)
        .map(|(s, f)| {
            let index = select(f, &lambda.weights);
            Selection { id: s.id, index, score: score(&f[index], &lambda.weights), sptm: *f[index].last().unwrap() }
        })
        .collect();
    let baseline: Vec<usize> = features.iter().map(|f| select(f, &base_lambda.weights)).collect();
    let chosen: Vec<usize> = selections.iter().map(|s| s.index).collect();
    Ok(RerankResult {
        bleu: selection_bleu(&stats, &chosen),
        baseline_bleu: selection_bleu(&stats, &baseline),
        oracle_bleu: selection_bleu(&stats, &oracle_choice(samples, true)),
        oracle_worst_bleu: selection_bleu(&stats, &oracle_choice(samples, false)),
        selections,
        baseline,
    })
}

/// Picks `argmax λ·h + λ_{M+1}·h_{M+1}` per sample and reports corpus BLEU
/// next to the baseline and oracle selections.
pub fn rerank<T: Scalar>(
    samples: &[TrainingSample],
    params: &ModelParams<T>,
    lambda: &LambdaVector,
    vocab: &Vocabulary,
) -> Result<RerankResult> {
    for s in samples {
        lambda.check_features(s.num_features())?;
    }
    let features = feature_table(samples, params, vocab)?;
    rerank_features(samples, &features, lambda)
}
