//! Reference implementations written independently of the library, used as
//! oracles by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use sptm::gradcheck::ToyProblem;
use sptm::{Arch, ModelParams, SimMode, TrainingSample};

fn grams(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for i in 0..=tokens.len() - n {
        *out.entry(tokens[i..i + n].join("\u{1}")).or_insert(0) += 1;
    }
    out
}

/// (matches, totals) per order 1..=4, plus lengths.
fn ngram_stats(reference: &[String], candidate: &[String]) -> ([usize; 4], [usize; 4], usize, usize) {
    let r: Vec<String> = reference.iter().map(|t| t.to_lowercase()).collect();
    let c: Vec<String> = candidate.iter().map(|t| t.to_lowercase()).collect();
    let mut m = [0; 4];
    let mut t = [0; 4];
    for n in 1..=4 {
        let cg = grams(&c, n);
        let rg = grams(&r, n);
        for (g, k) in &cg {
            t[n - 1] += k;
            m[n - 1] += (*k).min(*rg.get(g).unwrap_or(&0));
        }
    }
    (m, t, c.len(), r.len())
}

fn brevity(c: usize, r: usize) -> f64 {
    if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

/// Sentence BLEU: orders up to min(4, |candidate|), add-one smoothing on
/// orders two and up, plain unigram precision.
pub fn sentence_bleu(reference: &[String], candidate: &[String]) -> f64 {
    let (m, t, c, r) = ngram_stats(reference, candidate);
    if c == 0 || m[0] == 0 {
        return 0.0;
    }
    let order = c.min(4);
    let mut product = m[0] as f64 / t[0] as f64;
    for n in 1..order {
        product *= (m[n] + 1) as f64 / (t[n] + 1) as f64;
    }
    product.powf(1.0 / order as f64) * brevity(c, r)
}

/// Unsmoothed corpus BLEU-4.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let (mut m, mut t, mut c, mut r) = ([0usize; 4], [0usize; 4], 0, 0);
    for (reference, candidate) in pairs {
        let (pm, pt, pc, pr) = ngram_stats(reference, candidate);
        for n in 0..4 {
            m[n] += pm[n];
            t[n] += pt[n];
        }
        c += pc;
        r += pr;
    }
    if c == 0 || m.contains(&0) {
        return 0.0;
    }
    let product: f64 = (0..4).map(|n| m[n] as f64 / t[n] as f64).product();
    product.powf(0.25) * brevity(c, r)
}

fn tokens_vector(tokens: &[String], vocab: &sptm::Vocabulary) -> Vec<f64> {
    let mut x = vec![0.0; vocab.len()];
    for t in tokens {
        x[vocab.get(t).unwrap_or(0)] += 1.0;
    }
    x
}

/// Forward pass straight from the matrix definitions.
pub fn project(x: &[f64], p: &ModelParams) -> Vec<f64> {
    let layer = |input: &[f64], w: &sptm::Matrix, squash: bool| -> Vec<f64> {
        (0..w.cols())
            .map(|j| {
                let z: f64 = (0..w.rows()).map(|i| w[(i, j)] * input[i]).sum();
                if squash {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect()
    };
    match p.arch {
        Arch::Linear => layer(x, &p.w1, false),
        Arch::Nonlinear => layer(&layer(x, &p.w1, true), &p.w2, true),
    }
}

fn vec_sim(a: &[f64], b: &[f64], mode: SimMode) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    match mode {
        SimMode::Dot => d,
        SimMode::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                d / (na * nb)
            }
        }
    }
}

/// Phrase similarity, including the word-level mean-of-max variant.
pub fn similarity(f: &[String], e: &[String], p: &ModelParams, vocab: &sptm::Vocabulary) -> f64 {
    if !p.word_level {
        return vec_sim(&project(&tokens_vector(f, vocab), p), &project(&tokens_vector(e, vocab), p), p.sim_mode);
    }
    if f.is_empty() || e.is_empty() {
        return 0.0;
    }
    let fy: Vec<Vec<f64>> = f.iter().map(|w| project(&tokens_vector(std::slice::from_ref(w), vocab), p)).collect();
    let ey: Vec<Vec<f64>> = e.iter().map(|w| project(&tokens_vector(std::slice::from_ref(w), vocab), p)).collect();
    let s: Vec<Vec<f64>> = fy.iter().map(|u| ey.iter().map(|v| vec_sim(u, v, p.sim_mode)).collect()).collect();
    let row = s.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / f.len() as f64;
    let col = (0..e.len()).map(|j| s.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>()
        / e.len() as f64;
    0.5 * row + 0.5 * col
}

/// Negative mean expected sentence BLEU.
pub fn loss(samples: &[TrainingSample], vocab: &sptm::Vocabulary, weights: &[f64], p: &ModelParams) -> f64 {
    let m = weights.len() - 1;
    let mut total = 0.0;
    for s in samples {
        let scores: Vec<f64> = s
            .candidates
            .iter()
            .map(|c| {
                let base: f64 = c.features.iter().zip(&weights[..m]).map(|(h, w)| h * w).sum();
                let h: f64 =
                    c.derivation.pairs.iter().map(|pp| similarity(&pp.source.tokens, &pp.target.tokens, p, vocab)).sum();
                base + weights[m] * h
            })
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|v| (v - top).exp()).sum();
        total += s.candidates.iter().zip(&scores).map(|(c, v)| (v - top).exp() / z * c.sbleu).sum::<f64>();
    }
    -total / samples.len() as f64
}

pub fn problem_loss(problem: &ToyProblem, p: &ModelParams) -> f64 {
    loss(&problem.samples, &problem.vocab, &problem.lambda.weights, p)
}

/// Central finite differences of [`problem_loss`] over the flattened θ.
pub fn fd_gradient(problem: &ToyProblem, h: f64) -> Vec<f64> {
    let theta = problem.params.to_flat();
    let mut probe = problem.params.clone();
    (0..theta.len())
        .map(|i| {
            let mut x = theta.clone();
            x[i] += h;
            probe.set_flat(&x);
            let plus = problem_loss(problem, &probe);
            x[i] = theta[i] - h;
            probe.set_flat(&x);
            let minus = problem_loss(problem, &probe);
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(1, |b|)`, maximized over entries.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}
