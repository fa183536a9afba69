mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sptm::corpus::{Derivation, NBestEntry, Phrase, PhrasePair, TrainingSample};
use sptm::gradcheck::{toy_problem, VARIANTS};
use sptm::model::{encode, encode_tokens, load_model, save_model, similarity};
use sptm::objective::{error_terms, expected_bleu, full_gradient, score_candidates, sim_gradient};
use sptm::{Arch, LambdaVector, ModelParams, SimMode, Vocabulary};

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(["a", "b", "c", "d", "e", "f"])
}

fn random_phrase(rng: &mut ChaCha8Rng, max: usize) -> Vec<String> {
    let words = ["a", "b", "c", "d", "e", "f", "zz"];
    (0..rng.random_range(1..=max)).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
}

fn random_params(rng: &mut ChaCha8Rng, v: &Vocabulary, (arch, sim, wl): (Arch, SimMode, bool)) -> ModelParams {
    let k2 = if arch == Arch::Nonlinear { rng.random_range(1..=4) } else { 0 };
    let mut p = ModelParams::random(v.len(), rng.random_range(1..=4), k2, arch, sim, wl, rng);
    p.w1.scale(1.5);
    p
}

#[test]
fn encoding_counts_and_ignores_order() {
    let v = vocab();
    let x = encode_tokens(&common::toks("a a b"), &v);
    assert_eq!(x.entries(), &[(1, 2), (2, 1)]);
    assert_eq!(x, encode_tokens(&common::toks("b a a"), &v));
}

#[test]
fn similarity_matches_independent_forward_pass() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..80 {
        let p = random_params(&mut rng, &v, VARIANTS[i % 8]);
        let f = random_phrase(&mut rng, 3);
        let e = random_phrase(&mut rng, 3);
        let ours = similarity(&Phrase::source(&f), &Phrase::target(&e), &p, &v).unwrap();
        let oracle = common::similarity(&f, &e, &p, &v);
        assert!((ours - oracle).abs() <= 1e-12, "{ours} vs {oracle}");
    }
}

#[test]
fn cosine_self_similarity_is_one() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for arch in [Arch::Nonlinear, Arch::Linear] {
        let p = random_params(&mut rng, &v, (arch, SimMode::Cosine, false));
        let f = common::toks("a c d");
        let s = similarity(&Phrase::source(&f), &Phrase::target(&f), &p, &v).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sim_gradient_matches_finite_differences() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for i in 0..40 {
        let p = random_params(&mut rng, &v, VARIANTS[i % 8]);
        let f = random_phrase(&mut rng, 3);
        let e = random_phrase(&mut rng, 3);
        let analytic = sim_gradient(&Phrase::source(&f), &Phrase::target(&e), &p, &v).unwrap().to_flat();
        let theta = p.to_flat();
        let mut probe = p.clone();
        let fd: Vec<f64> = (0..theta.len())
            .map(|k| {
                let mut x = theta.clone();
                x[k] += h;
                probe.set_flat(&x);
                let plus = common::similarity(&f, &e, &probe, &v);
                x[k] = theta[k] - h;
                probe.set_flat(&x);
                let minus = common::similarity(&f, &e, &probe, &v);
                (plus - minus) / (2.0 * h)
            })
            .collect();
        let err = common::max_rel_error(&analytic, &fd);
        assert!(err <= 1e-6, "variant {:?}: relative error {err:e}", VARIANTS[i % 8]);
    }
}

#[test]
fn model_file_round_trip_and_bad_header() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dir = tempfile::tempdir().unwrap();
    for variant in VARIANTS {
        let p = random_params(&mut rng, &v, variant);
        let path = dir.path().join("m");
        save_model(&p, &v, &path).unwrap();
        let (q, w) = load_model::<f64>(&path).unwrap();
        assert_eq!(w, v);
        assert_eq!(q.arch, p.arch);
        assert_eq!(q.sim_mode, p.sim_mode);
        assert_eq!(q.word_level, p.word_level);
        let bits = |m: &ModelParams| m.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&q), bits(&p));
        let text = std::fs::read_to_string(&path).unwrap();
        let k1 = p.hidden_dim();
        let broken = text.replacen(&format!("k1 {k1}\n"), &format!("k1 {}\n", k1 + 1), 1);
        assert_ne!(broken, text);
        std::fs::write(&path, broken).unwrap();
        assert!(load_model::<f64>(&path).is_err());
    }
}

fn sample(cands: Vec<(Vec<(&str, &str)>, f64, f64)>) -> TrainingSample {
    let candidates = cands
        .into_iter()
        .map(|(pairs, feat, sbleu)| {
            let derivation = Derivation::new(pairs.iter().map(|(f, e)| PhrasePair::new(&common::toks(f), &common::toks(e))).collect());
            NBestEntry { tokens: derivation.target_tokens().map(String::from).collect(), features: vec![feat], derivation, sbleu }
        })
        .collect();
    TrainingSample { id: 0, source: Vec::new(), reference: common::toks("a b"), candidates }
}

#[test]
fn probabilities_match_direct_normalization() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_params(&mut rng, &v, VARIANTS[0]);
    let s = sample(vec![
        (vec![("a", "b")], 0.3, 0.2),
        (vec![("a b", "c")], -1.2, 0.9),
        (vec![("d", "e"), ("a", "f")], 2.0, 0.5),
    ]);
    let lambda = LambdaVector::new(vec![0.7, 1.3]);
    let scores = score_candidates(&s, &p, &lambda, &v).unwrap();
    let totals: Vec<f64> = s
        .candidates
        .iter()
        .map(|c| {
            let h: f64 = c.derivation.pairs.iter().map(|pp| common::similarity(&pp.source.tokens, &pp.target.tokens, &p, &v)).sum();
            0.7 * c.features[0] + 1.3 * h
        })
        .collect();
    let z: f64 = totals.iter().map(|t| t.exp()).sum();
    for (sc, t) in scores.iter().zip(&totals) {
        assert!((sc.prob - t.exp() / z).abs() <= 1e-12);
    }
    let xb: f64 = scores.iter().zip(&s.candidates).map(|(sc, c)| sc.prob * c.sbleu).sum();
    assert!((expected_bleu(&s, &p, &lambda, &v).unwrap() - xb).abs() <= 1e-12);
}

#[test]
fn degenerate_expectations() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_params(&mut rng, &v, VARIANTS[1]);
    let lambda = LambdaVector::new(vec![0.4, 2.0]);
    let single = sample(vec![(vec![("a", "b")], 1.0, 0.37)]);
    assert_eq!(expected_bleu(&single, &p, &lambda, &v).unwrap(), 0.37);
    let equal = sample(vec![(vec![("a", "b")], 1.0, 0.25), (vec![("c", "d")], -3.0, 0.25)]);
    assert!((expected_bleu(&equal, &p, &lambda, &v).unwrap() - 0.25).abs() < 1e-15);
    // a pair used once by every candidate has zero error term
    let shared = sample(vec![(vec![("a", "b"), ("c", "d")], 1.0, 0.1), (vec![("a", "b"), ("e", "f")], 0.0, 0.8)]);
    let terms = error_terms(&shared, &p, &lambda, &v).unwrap();
    assert!(terms.deltas[&PhrasePair::new(&["a"], &["b"])].abs() < 1e-15);
}

#[test]
fn error_terms_match_term_by_term_sum() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_params(&mut rng, &v, VARIANTS[0]);
    let lambda = LambdaVector::new(vec![0.5, 1.7]);
    let s = sample(vec![(vec![("a", "b"), ("a", "b")], 0.2, 0.3), (vec![("a", "b"), ("c", "d")], 0.9, 0.6)]);
    let terms = error_terms(&s, &p, &lambda, &v).unwrap();
    let scores = score_candidates(&s, &p, &lambda, &v).unwrap();
    let xb: f64 = scores.iter().zip(&s.candidates).map(|(sc, c)| sc.prob * c.sbleu).sum();
    let mut brute: BTreeMap<PhrasePair, f64> = BTreeMap::new();
    for (sc, c) in scores.iter().zip(&s.candidates) {
        for pp in &c.derivation.pairs {
            *brute.entry(pp.clone()).or_default() += (c.sbleu - xb) * sc.prob * 1.7;
        }
    }
    assert_eq!(terms.deltas.len(), brute.len());
    for (k, d) in brute {
        assert!((terms.deltas[&k] - d).abs() <= 1e-12);
    }
}

#[test]
fn gradient_vanishes_without_choice_or_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let problem = toy_problem(&mut rng, Arch::Nonlinear, SimMode::Dot, false);
    let off = problem.lambda.with_sptm(0.0);
    let g = full_gradient(&problem.samples, &problem.params, &off, &problem.vocab).unwrap();
    assert!(g.grad.to_flat().iter().all(|&x| x == 0.0));
    let singles: Vec<TrainingSample> = problem
        .samples
        .iter()
        .map(|s| TrainingSample { candidates: s.candidates[..1].to_vec(), ..s.clone() })
        .collect();
    let g = full_gradient(&singles, &problem.params, &problem.lambda, &problem.vocab).unwrap();
    assert!(g.grad.to_flat().iter().all(|&x| x == 0.0));
}

#[test]
fn full_gradient_matches_finite_differences_on_three_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 8 {
        let (arch, sim, wl) = VARIANTS[checked];
        let mut problem = toy_problem(&mut rng, arch, sim, wl);
        if problem.samples.len() < 3 {
            continue;
        }
        problem.samples.truncate(3);
        let g = full_gradient(&problem.samples, &problem.params, &problem.lambda, &problem.vocab).unwrap();
        let err = common::max_rel_error(&g.grad.to_flat(), &common::fd_gradient(&problem, 1e-5));
        assert!(err <= 1e-5, "relative error {err:e}");
        checked += 1;
    }
}

#[test]
fn f32_and_f64_agree_loosely() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let problem = toy_problem(&mut rng, Arch::Nonlinear, SimMode::Dot, false);
    let p32 = sptm::ModelParams32::zeros(
        problem.params.input_dim(),
        problem.params.hidden_dim(),
        problem.params.output_dim(),
        Arch::Nonlinear,
        SimMode::Dot,
        false,
    )
    .with_flat(&problem.params.to_flat().iter().map(|&x| x as f32).collect::<Vec<_>>());
    let g64 = full_gradient(&problem.samples, &problem.params, &problem.lambda, &problem.vocab).unwrap();
    let g32 = full_gradient(&problem.samples, &p32, &problem.lambda, &problem.vocab).unwrap();
    assert!((g64.loss - g32.loss as f64).abs() < 1e-5);
    let flat32: Vec<f64> = g32.grad.to_flat().iter().map(|&x| x as f64).collect();
    assert!(common::max_rel_error(&flat32, &g64.grad.to_flat()) < 1e-4);
}

proptest! {
    #[test]
    fn similarity_is_symmetric_and_order_free(seed in 0u64..10_000, variant in 0usize..8) {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng, &v, VARIANTS[variant]);
        let f = random_phrase(&mut rng, 4);
        let e = random_phrase(&mut rng, 4);
        let fe = similarity(&Phrase::source(&f), &Phrase::target(&e), &p, &v).unwrap();
        let ef = similarity(&Phrase::source(&e), &Phrase::target(&f), &p, &v).unwrap();
        prop_assert!((fe - ef).abs() <= 1e-12);
        let mut rev = f.clone();
        rev.reverse();
        let permuted = similarity(&Phrase::source(&rev), &Phrase::target(&e), &p, &v).unwrap();
        prop_assert!((fe - permuted).abs() <= 1e-12);
    }

    #[test]
    fn encoding_matches_tally(tokens in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "q"]), 6)) {
        let v = vocab();
        let toks: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
        let x = encode(&Phrase::source(&toks), &v);
        for i in 0..v.len() {
            let tally = toks.iter().filter(|t| v.index_of(t) == i).count() as u32;
            prop_assert_eq!(x.count(i), tally);
        }
    }
}
