//! Central finite-difference check of the analytic corpus gradient.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{Derivation, LambdaVector, NBestEntry, PhrasePair, TrainingSample, Vocabulary};
use crate::error::Result;
use crate::model::{Arch, ModelParams, SimMode};
use crate::objective::Objective;

/// A small random problem: corpus, vocabulary, weights and parameters.
pub struct ToyProblem {
    pub samples: Vec<TrainingSample>,
    pub vocab: Vocabulary,
    pub lambda: LambdaVector,
    pub params: ModelParams<f64>,
}

/// Every (architecture, similarity, word-level) combination.
pub const VARIANTS: [(Arch, SimMode, bool); 8] = [
    (Arch::Nonlinear, SimMode::Dot, false),
    (Arch::Nonlinear, SimMode::Cosine, false),
    (Arch::Linear, SimMode::Cosine, false),
    (Arch::Linear, SimMode::Dot, false),
    (Arch::Nonlinear, SimMode::Dot, true),
    (Arch::Nonlinear, SimMode::Cosine, true),
    (Arch::Linear, SimMode::Cosine, true),
    (Arch::Linear, SimMode::Dot, true),
];

/// Draws a toy problem with `d <= 10`, `k1, k2 <= 4`, at most 4 samples of
/// at most 4 candidates, for the given model variant.
pub fn toy_problem(rng: &mut ChaCha8Rng, arch: Arch, sim_mode: SimMode, word_level: bool) -> ToyProblem {
    let d = rng.random_range(4..=10);
    let words: Vec<String> = (1..d).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_tokens(&words);
    let phrase = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(1..=2);
        (0..len).map(|_| words.choose(rng).unwrap().clone()).collect()
    };
    let num_features = 2;
    let mut samples = Vec::new();
    for id in 0..rng.random_range(1..=4u64) {
        let reference: Vec<String> = (0..rng.random_range(2..=5)).map(|_| words.choose(rng).unwrap().clone()).collect();
        let mut candidates: Vec<NBestEntry> = Vec::new();
        for _ in 0..rng.random_range(2..=4) {
            let pairs: Vec<PhrasePair> =
                (0..rng.random_range(1..=3)).map(|_| PhrasePair::new(&phrase(rng), &phrase(rng))).collect();
            let derivation = Derivation::new(pairs);
            let tokens: Vec<String> = derivation.target_tokens().map(String::from).collect();
            if candidates.iter().any(|c| c.tokens == tokens && c.derivation == derivation) {
                continue;
            }
            let features = (0..num_features).map(|_| StandardNormal.sample(rng)).collect();
            candidates.push(NBestEntry { tokens, features, derivation, sbleu: 0.0 });
        }
        let mut s = TrainingSample { id, source: Vec::new(), reference, candidates };
        s.relabel();
        samples.push(s);
    }
    let base: Vec<f64> = (0..num_features).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lambda = LambdaVector::from_parts(&base, rng.random_range(0.5..2.0));
    let k1 = rng.random_range(1..=4);
    let k2 = if arch == Arch::Nonlinear { rng.random_range(1..=4) } else { 0 };
    let mut params = ModelParams::random(vocab.len(), k1, k2, arch, sim_mode, word_level, rng);
    // larger weights keep the tanh layers away from the linear regime
    params.w1.scale(2.0);
    ToyProblem { samples, vocab, lambda, params }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Max over entries of `|analytic - fd| / max(1, |fd|)`.
    pub max_rel_error: f64,
    pub entries: usize,
}

/// Compares the analytic gradient against central differences of the loss
/// with step `h` on every parameter entry.
pub fn check(problem: &ToyProblem, h: f64) -> Result<GradcheckReport> {
    let objective = Objective::<f64>::new(&problem.samples, &problem.vocab, &problem.lambda)?;
    let analytic = objective.evaluate(&problem.params)?.grad.to_flat();
    let theta = problem.params.to_flat();
    let mut probe = problem.params.clone();
    let mut max_rel_error: f64 = 0.0;
    for i in 0..theta.len() {
        let mut x = theta.clone();
        x[i] = theta[i] + h;
        probe.set_flat(&x);
        let plus = objective.loss(&probe)?.0;
        x[i] = theta[i] - h;
        probe.set_flat(&x);
        let minus = objective.loss(&probe)?.0;
        let fd = (plus - minus) / (2.0 * h);
        max_rel_error = max_rel_error.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(GradcheckReport { max_rel_error, entries: theta.len() })
}

/// Runs `configs` random problems cycling through [`VARIANTS`].
pub fn run_random(seed: u64, configs: usize, h: f64) -> Result<Vec<(usize, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..configs)
        .map(|i| {
            let (arch, sim, wl) = VARIANTS[i % VARIANTS.len()];
            let problem = toy_problem(&mut rng, arch, sim, wl);
            check(&problem, h).map(|r| (i, r))
        })
        .collect()
}
