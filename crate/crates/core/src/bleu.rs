//! Sentence- and corpus-level BLEU-4 with case-insensitive token matching.
//!
//! Sentence BLEU is smoothed by adding one to the matched and total counts of
//! every order n >= 2; unigram precision is left unsmoothed so that a
//! candidate without any unigram match scores exactly 0. Candidates shorter
//! than four tokens use orders up to their own length. Corpus BLEU is the
//! usual unsmoothed aggregate.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Identifies the sentence-BLEU smoothing in model files.
pub const SMOOTHING_TAG: &str = "add1-n2plus";

/// Clipped n-gram statistics of one or more candidate/reference pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub candidate_len: u64,
    pub reference_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn lowered<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

impl BleuStats {
    pub fn from_pair<R: AsRef<str>, C: AsRef<str>>(reference: &[R], candidate: &[C]) -> Self {
        let reference = lowered(reference);
        let candidate = lowered(candidate);
        let mut stats = Self {
            candidate_len: candidate.len() as u64,
            reference_len: reference.len() as u64,
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(&candidate, n);
            let refs = ngram_counts(&reference, n);
            stats.totals[n - 1] = cand.values().sum();
            stats.matches[n - 1] = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        }
        stats
    }

    pub fn merge(&mut self, other: &Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    fn brevity_penalty(&self) -> f64 {
        if self.candidate_len >= self.reference_len {
            1.0
        } else {
            (1.0 - self.reference_len as f64 / self.candidate_len as f64).exp()
        }
    }

    /// Standard BLEU-4: geometric mean of the four precisions times the
    /// brevity penalty; 0 whenever any order has no match.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        (log_sum / MAX_ORDER as f64).exp() * self.brevity_penalty()
    }

    /// Smoothed sentence-level score (see module docs).
    pub fn smoothed_score(&self) -> f64 {
        if self.candidate_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let order = (self.candidate_len as usize).min(MAX_ORDER);
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..order {
            log_sum += ((self.matches[n] + 1) as f64 / (self.totals[n] + 1) as f64).ln();
        }
        (log_sum / order as f64).exp() * self.brevity_penalty()
    }
}

/// Smoothed sentence-level BLEU in `[0, 1]`.
pub fn sentence_bleu<R: AsRef<str>, C: AsRef<str>>(reference: &[R], candidate: &[C]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    Ok(BleuStats::from_pair(reference, candidate).smoothed_score())
}

/// Unsmoothed corpus BLEU over `(reference, candidate)` pairs.
pub fn corpus_bleu<R, C>(pairs: &[(R, C)]) -> Result<f64>
where
    R: AsRef<[String]>,
    C: AsRef<[String]>,
{
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut total = BleuStats::default();
    for (r, c) in pairs {
        total.merge(&BleuStats::from_pair(r.as_ref(), c.as_ref()));
    }
    Ok(total.score())
}
