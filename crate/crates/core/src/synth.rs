//! Planted-semantics synthetic N-best data.
//!
//! Each concept owns a set of source phrases, and every source phrase has
//! one canonical target translation. References use the canonical
//! translations; candidates corrupt individual phrases into translations
//! of other concepts at the configured noise rate and vary the phrase
//! segmentation. Baseline features see the corruption only through heavy
//! noise, so recovering the clean candidates requires a model of which
//! phrase pairs belong together.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{save_nbest, Derivation, LambdaVector, NBestEntry, PhrasePair, TrainingSample};
use crate::error::{Error, Result};

/// Baseline feature weights written to the lambda file, followed by 1.0 for
/// the similarity feature.
pub const BASELINE_LAMBDA: [f64; 3] = [1.0, 0.5, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub concepts: usize,
    pub phrases_per_concept: usize,
    pub sentences: usize,
    pub phrases_per_sentence: usize,
    pub candidates: usize,
    /// Probability that a candidate phrase is replaced by another concept's
    /// translation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            concepts: 5,
            phrases_per_concept: 3,
            sentences: 200,
            phrases_per_sentence: 4,
            candidates: 8,
            noise: 0.3,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.concepts,
            self.phrases_per_concept,
            self.sentences,
            self.phrases_per_sentence,
            self.candidates,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("synthetic counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise rate {} outside [0, 1]", self.noise)));
        }
        if self.noise > 0.0 && self.concepts < 2 {
            return Err(Error::Config("noise needs at least two concepts".into()));
        }
        Ok(())
    }
}

fn source_phrase(concept: usize, j: usize) -> Vec<String> {
    let word = format!("f{concept}_{j}");
    if j % 2 == 1 {
        vec!["la".into(), word]
    } else {
        vec![word]
    }
}

fn target_phrase(concept: usize, j: usize) -> Vec<String> {
    let word = format!("e{concept}_{j}");
    if j % 2 == 1 {
        vec!["the".into(), word]
    } else {
        vec![word]
    }
}

/// Generated data plus the weights to start from.
pub struct SynthData {
    pub samples: Vec<TrainingSample>,
    pub lambda: LambdaVector,
}

/// Generates the corpus in memory; sentence BLEU labels are filled in.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lambda = LambdaVector::from_parts(&BASELINE_LAMBDA, 1.0);
    let mut samples = Vec::with_capacity(spec.sentences);
    for id in 0..spec.sentences {
        let slots: Vec<(usize, usize)> = (0..spec.phrases_per_sentence)
            .map(|_| (rng.random_range(0..spec.concepts), rng.random_range(0..spec.phrases_per_concept)))
            .collect();
        let source: Vec<String> = slots.iter().flat_map(|&(c, j)| source_phrase(c, j)).collect();
        let reference: Vec<String> = slots.iter().flat_map(|&(c, j)| target_phrase(c, j)).collect();

        let mut seen = HashSet::new();
        let mut candidates = Vec::with_capacity(spec.candidates);
        let mut attempts = 0;
        while candidates.len() < spec.candidates {
            attempts += 1;
            if attempts > 200 * spec.candidates {
                return Err(Error::Config(format!(
                    "cannot draw {} distinct candidates per sentence; raise noise or phrases per sentence",
                    spec.candidates
                )));
            }
            let (entry, errors) = draw_candidate(&slots, spec, &mut rng);
            if seen.insert((entry.tokens.clone(), entry.derivation.clone())) {
                let segments = entry.derivation.len();
                let mut entry = entry;
                let n1: f64 = StandardNormal.sample(&mut rng);
                let n2: f64 = StandardNormal.sample(&mut rng);
                entry.features = vec![-0.5 * errors as f64 + n1, n2, -(segments as f64)];
                candidates.push(entry);
            }
        }
        // decoder-like ordering: best baseline score first
        candidates.sort_by(|a: &NBestEntry, b: &NBestEntry| {
            let sa: f64 = a.features.iter().zip(&BASELINE_LAMBDA).map(|(h, w)| h * w).sum();
            let sb: f64 = b.features.iter().zip(&BASELINE_LAMBDA).map(|(h, w)| h * w).sum();
            sb.total_cmp(&sa)
        });
        let mut sample = TrainingSample { id: id as u64, source, reference, candidates };
        sample.relabel();
        samples.push(sample);
    }
    Ok(SynthData { samples, lambda })
}

fn draw_candidate(slots: &[(usize, usize)], spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (NBestEntry, usize) {
    let mut errors = 0;
    let pairs: Vec<(Vec<String>, Vec<String>)> = slots
        .iter()
        .map(|&(c, j)| {
            let target = if spec.noise > 0.0 && rng.random::<f64>() < spec.noise {
                errors += 1;
                let mut other = rng.random_range(0..spec.concepts - 1);
                if other >= c {
                    other += 1;
                }
                target_phrase(other, rng.random_range(0..spec.phrases_per_concept))
            } else {
                target_phrase(c, j)
            };
            (source_phrase(c, j), target)
        })
        .collect();
    // merge adjacent slots into one segment with probability 1/2
    let mut segments: Vec<PhrasePair> = Vec::new();
    for (i, (src, tgt)) in pairs.into_iter().enumerate() {
        let merge = i > 0 && rng.random::<bool>();
        match segments.last_mut() {
            Some(last) if merge => {
                last.source.tokens.extend(src);
                last.target.tokens.extend(tgt);
            }
            _ => segments.push(PhrasePair::new(&src, &tgt)),
        }
    }
    let derivation = Derivation::new(segments);
    let tokens = derivation.target_tokens().map(String::from).collect();
    (NBestEntry { tokens, features: Vec::new(), derivation, sbleu: 0.0 }, errors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub references: PathBuf,
    pub nbest: PathBuf,
    pub lambda: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path, prefix: &str) -> Self {
        Self {
            references: dir.join(format!("{prefix}.ref")),
            nbest: dir.join(format!("{prefix}.nbest")),
            lambda: dir.join(format!("{prefix}.lambda")),
        }
    }
}

/// Writes `<prefix>.ref`, `<prefix>.nbest` and `<prefix>.lambda` into `dir`.
pub fn synthgen(spec: &SynthSpec, dir: impl AsRef<Path>, prefix: &str) -> Result<SynthPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = generate(spec)?;
    let paths = SynthPaths::in_dir(dir, prefix);
    save_nbest(&data.samples, &paths.nbest, &paths.references)?;
    data.lambda.save(&paths.lambda)?;
    Ok(paths)
}
