//! Vocabularies, phrases, N-best lists with derivations, and the text
//! formats they are read from and written to.
//!
//! N-best file, one candidate per line:
//!
//! ```text
//! <sent_id> ||| <candidate tokens> ||| <feat_1> ... <feat_M> ||| [ src+ # tgt+ ] [ src+ # tgt+ ] ...
//! ```
//!
//! Reference file: `<sent_id> ||| <source tokens> ||| <reference tokens>`.
//! Lambda file: one weight per line, `M + 1` lines, the last one weighting
//! the phrase-similarity feature.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::bleu;
use crate::error::{Error, Result};

/// Reserved out-of-vocabulary token, always at index 0.
pub const UNK: &str = "<unk>";

/// Joint source + target token index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary in first-occurrence order with [`UNK`] at index 0.
    /// Duplicates (and any explicit `UNK`) are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self { tokens: vec![UNK.to_string()], index: HashMap::new() };
        vocab.index.insert(UNK.to_string(), 0);
        for tok in tokens {
            let tok = tok.as_ref();
            if !vocab.index.contains_key(tok) {
                vocab.index.insert(tok.to_string(), vocab.tokens.len());
                vocab.tokens.push(tok.to_string());
            }
        }
        vocab
    }

    /// Reconstructs a vocabulary from its exact token list (index order).
    pub fn from_ordered(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::ModelFormat(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::ModelFormat(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Index of `token`, or 0 (UNK) when unseen.
    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Dimension `d` of the bag-of-words space.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Phrase {
    pub side: Side,
    pub tokens: Vec<String>,
}

impl Phrase {
    pub fn new<S: AsRef<str>>(side: Side, tokens: &[S]) -> Self {
        Self { side, tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect() }
    }

    pub fn source<S: AsRef<str>>(tokens: &[S]) -> Self {
        Self::new(Side::Source, tokens)
    }

    pub fn target<S: AsRef<str>>(tokens: &[S]) -> Self {
        Self::new(Side::Target, tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhrasePair {
    pub source: Phrase,
    pub target: Phrase,
}

impl PhrasePair {
    pub fn new<S: AsRef<str>>(source: &[S], target: &[S]) -> Self {
        Self { source: Phrase::source(source), target: Phrase::target(target) }
    }
}

/// Segmentation of a candidate into aligned phrase pairs, in target order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Derivation {
    pub pairs: Vec<PhrasePair>,
}

impl Derivation {
    pub fn new(pairs: Vec<PhrasePair>) -> Self {
        Self { pairs }
    }

    pub fn target_tokens(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().flat_map(|p| p.target.tokens.iter().map(String::as_str))
    }

    /// Whether the concatenated target phrases equal `tokens`.
    pub fn reproduces<S: AsRef<str>>(&self, tokens: &[S]) -> bool {
        self.target_tokens().eq(tokens.iter().map(|t| t.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut pairs = Vec::new();
        let mut it = text.split_whitespace();
        while let Some(open) = it.next() {
            if open != "[" {
                return Err(format!("expected '[' in derivation, found {open:?}"));
            }
            let mut src = Vec::new();
            let mut tgt = Vec::new();
            let mut seen_hash = false;
            loop {
                match it.next() {
                    None => return Err("unterminated derivation segment".into()),
                    Some("]") => break,
                    Some("#") if !seen_hash => seen_hash = true,
                    Some(tok @ ("[" | "#")) => return Err(format!("unexpected {tok:?} in segment")),
                    Some(tok) if seen_hash => tgt.push(tok.to_string()),
                    Some(tok) => src.push(tok.to_string()),
                }
            }
            if !seen_hash || src.is_empty() || tgt.is_empty() {
                return Err("segment needs non-empty source and target sides".into());
            }
            pairs.push(PhrasePair {
                source: Phrase { side: Side::Source, tokens: src },
                target: Phrase { side: Side::Target, tokens: tgt },
            });
        }
        Ok(Self { pairs })
    }
}

impl fmt::Display for Derivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.pairs.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "[ {} # {} ]", p.source, p.target)?;
        }
        Ok(())
    }
}

/// One candidate translation of an N-best list.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestEntry {
    pub tokens: Vec<String>,
    /// Baseline feature values `h_1 .. h_M`.
    pub features: Vec<f64>,
    pub derivation: Derivation,
    /// Cached `bleu::sentence_bleu(reference, tokens)`.
    pub sbleu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: u64,
    pub source: Vec<String>,
    pub reference: Vec<String>,
    pub candidates: Vec<NBestEntry>,
}

impl TrainingSample {
    pub fn num_features(&self) -> usize {
        self.candidates.first().map_or(0, |c| c.features.len())
    }

    /// Recomputes every candidate's cached sentence BLEU.
    pub fn relabel(&mut self) {
        for c in &mut self.candidates {
            c.sbleu = bleu::sentence_bleu(&self.reference, &c.tokens).unwrap_or(0.0);
        }
    }
}

/// Log-linear weights `λ_1 .. λ_M, λ_{M+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaVector {
    pub weights: Vec<f64>,
}

impl LambdaVector {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    /// Baseline weights followed by `sptm_weight`.
    pub fn from_parts(base: &[f64], sptm_weight: f64) -> Self {
        let mut weights = base.to_vec();
        weights.push(sptm_weight);
        Self { weights }
    }

    pub fn base(&self) -> &[f64] {
        &self.weights[..self.weights.len().saturating_sub(1)]
    }

    /// `λ_{M+1}`.
    pub fn sptm(&self) -> f64 {
        self.weights.last().copied().unwrap_or(0.0)
    }

    pub fn with_sptm(&self, w: f64) -> Self {
        let mut out = self.clone();
        if let Some(last) = out.weights.last_mut() {
            *last = w;
        }
        out
    }

    pub fn num_base_features(&self) -> usize {
        self.weights.len().saturating_sub(1)
    }

    pub fn check_features(&self, num_features: usize) -> Result<()> {
        if self.weights.len() != num_features + 1 {
            return Err(Error::LambdaLength { expected: num_features + 1, found: self.weights.len() });
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut weights = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let w: f64 = line.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("not a number: {line:?}"),
            })?;
            weights.push(w);
        }
        if weights.is_empty() {
            return Err(Error::Empty("lambda file"));
        }
        Ok(Self { weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for w in &self.weights {
            text.push_str(&format!("{w}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split("|||").map(str::trim).collect()
}

fn lower_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// A reference file row: sentence id, source tokens, reference tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub id: u64,
    pub source: Vec<String>,
    pub reference: Vec<String>,
}

pub fn load_references(path: impl AsRef<Path>) -> Result<Vec<ReferenceRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: path.into(), line: i + 1, message };
        let fields = split_fields(line);
        if fields.len() != 3 {
            return Err(err(format!("expected 3 '|||'-separated fields, found {}", fields.len())));
        }
        let id: u64 = fields[0].parse().map_err(|_| err(format!("bad sentence id {:?}", fields[0])))?;
        if !seen.insert(id) {
            return Err(err(format!("duplicate sentence id {id}")));
        }
        let reference = lower_tokens(fields[2]);
        if reference.is_empty() {
            return Err(err("empty reference".into()));
        }
        rows.push(ReferenceRow { id, source: lower_tokens(fields[1]), reference });
    }
    Ok(rows)
}

/// Reads an N-best file and its reference file into training samples,
/// grouped by sentence id in order of first appearance, with sentence BLEU
/// labels computed against the references.
pub fn load_nbest(nbest: impl AsRef<Path>, references: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    let refs = load_references(references)?;
    let ref_by_id: HashMap<u64, &ReferenceRow> = refs.iter().map(|r| (r.id, r)).collect();

    let path = nbest.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples: Vec<TrainingSample> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut seen: Vec<HashSet<(Vec<String>, Derivation)>> = Vec::new();
    let mut num_features: Option<usize> = None;

    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let err = |message: String| Error::Parse { path: path.into(), line: lineno, message };
        let fields = split_fields(line);
        if fields.len() != 4 {
            return Err(err(format!("expected 4 '|||'-separated fields, found {}", fields.len())));
        }
        let id: u64 = fields[0].parse().map_err(|_| err(format!("bad sentence id {:?}", fields[0])))?;
        let tokens = lower_tokens(fields[1]);
        let features = fields[2]
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad feature value {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        match num_features {
            None => num_features = Some(features.len()),
            Some(m) if m != features.len() => {
                return Err(Error::FeatureCount { path: path.into(), line: lineno, expected: m, found: features.len() })
            }
            _ => {}
        }
        let derivation = Derivation::parse(&fields[3].to_lowercase()).map_err(err)?;
        if !tokens.is_empty() && derivation.is_empty() {
            return Err(err("missing derivation".into()));
        }
        if !derivation.reproduces(&tokens) {
            return Err(Error::DerivationMismatch { path: path.into(), line: lineno });
        }
        let idx = match slot.get(&id) {
            Some(&idx) => idx,
            None => {
                let r = ref_by_id.get(&id).ok_or_else(|| err(format!("no reference for sentence {id}")))?;
                samples.push(TrainingSample {
                    id,
                    source: r.source.clone(),
                    reference: r.reference.clone(),
                    candidates: Vec::new(),
                });
                seen.push(HashSet::new());
                slot.insert(id, samples.len() - 1);
                samples.len() - 1
            }
        };
        if !seen[idx].insert((tokens.clone(), derivation.clone())) {
            return Err(err(format!("duplicate candidate for sentence {id}")));
        }
        let sample = &mut samples[idx];
        let sbleu = bleu::sentence_bleu(&sample.reference, &tokens)?;
        sample.candidates.push(NBestEntry { tokens, features, derivation, sbleu });
    }
    if samples.is_empty() {
        return Err(Error::Empty("n-best file"));
    }
    Ok(samples)
}

/// Writes samples back out as an N-best file plus reference file.
pub fn save_nbest(samples: &[TrainingSample], nbest: impl AsRef<Path>, references: impl AsRef<Path>) -> Result<()> {
    let write = |path: &Path, f: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    };
    write(references.as_ref(), &|w| {
        for s in samples {
            writeln!(w, "{} ||| {} ||| {}", s.id, s.source.join(" "), s.reference.join(" "))?;
        }
        Ok(())
    })?;
    write(nbest.as_ref(), &|w| {
        for s in samples {
            for c in &s.candidates {
                let feats: Vec<String> = c.features.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{} ||| {} ||| {} ||| {}", s.id, c.tokens.join(" "), feats.join(" "), c.derivation)?;
            }
        }
        Ok(())
    })
}

/// Vocabulary over every token of the corpus (sources, references,
/// candidates and derivation phrases), in first-occurrence order.
pub fn build_vocabulary(samples: &[TrainingSample]) -> Result<Vocabulary> {
    let mut all: Vec<&str> = Vec::new();
    for s in samples {
        all.extend(s.source.iter().map(String::as_str));
        all.extend(s.reference.iter().map(String::as_str));
        for c in &s.candidates {
            all.extend(c.tokens.iter().map(String::as_str));
            for p in &c.derivation.pairs {
                all.extend(p.source.tokens.iter().map(String::as_str));
            }
        }
    }
    if all.is_empty() {
        return Err(Error::Empty("no tokens to build a vocabulary from"));
    }
    Ok(Vocabulary::from_tokens(all))
}

/// A distinct phrase pair with its total number of occurrences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairCount {
    pub pair: PhrasePair,
    pub count: usize,
}

/// Distinct phrase pairs over all derivations in canonical (sorted) order.
pub fn collect_phrase_pairs(samples: &[TrainingSample]) -> Vec<PairCount> {
    let mut counts: BTreeMap<&PhrasePair, usize> = BTreeMap::new();
    for p in samples.iter().flat_map(|s| &s.candidates).flat_map(|c| &c.derivation.pairs) {
        *counts.entry(p).or_default() += 1;
    }
    counts.into_iter().map(|(pair, count)| PairCount { pair: pair.clone(), count }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(tokens: &str, pairs: &[(&str, &str)]) -> NBestEntry {
        let derivation = Derivation::new(
            pairs
                .iter()
                .map(|(f, e)| {
                    PhrasePair::new(
                        &f.split_whitespace().collect::<Vec<_>>(),
                        &e.split_whitespace().collect::<Vec<_>>(),
                    )
                })
                .collect(),
        );
        NBestEntry { tokens: lower_tokens(tokens), features: vec![0.0], derivation, sbleu: 0.0 }
    }

    fn sample(candidates: Vec<NBestEntry>) -> TrainingSample {
        TrainingSample { id: 0, source: vec!["f1".into()], reference: vec!["e1".into()], candidates }
    }

    #[test]
    fn derivation_parses_and_prints() {
        let d = Derivation::parse("[ das haus # the house ] [ ist klein # is small ]").unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.reproduces(&["the", "house", "is", "small"]));
        assert_eq!(d.to_string(), "[ das haus # the house ] [ ist klein # is small ]");
        assert!(Derivation::parse("[ das # ]").is_err());
        assert!(Derivation::parse("[ das # the").is_err());
        assert!(Derivation::parse("das # the ]").is_err());
    }

    #[test]
    fn vocabulary_reserves_unk() {
        let v = Vocabulary::from_tokens(["a"]);
        assert_eq!(v.len(), 2);
        assert_eq!(v.index_of("a"), 1);
        assert_eq!(v.index_of("zzz"), 0);
        let again = Vocabulary::from_tokens(["a"]);
        assert_eq!(v, again);
    }

    #[test]
    fn build_vocabulary_rejects_empty_input() {
        assert!(matches!(build_vocabulary(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn repeated_pair_in_one_derivation_counts_twice() {
        let s = sample(vec![entry("e1 e1", &[("f1", "e1"), ("f1", "e1")])]);
        let pairs = collect_phrase_pairs(&[s]);
        assert_eq!(pairs, vec![PairCount { pair: PhrasePair::new(&["f1"], &["e1"]), count: 2 }]);
    }

    #[test]
    fn shared_pair_across_candidates_counts_twice() {
        let s = sample(vec![entry("e1", &[("f1", "e1")]), entry("e1 x", &[("f1", "e1"), ("f2", "x")])]);
        let pairs = collect_phrase_pairs(&[s]);
        assert_eq!(pairs[0].count, 2);
        assert_eq!(pairs[1].count, 1);
    }

    #[test]
    fn lambda_accessors() {
        let l = LambdaVector::from_parts(&[0.5, 0.25], 1.0);
        assert_eq!(l.base(), &[0.5, 0.25]);
        assert_eq!(l.sptm(), 1.0);
        assert_eq!(l.with_sptm(0.0).weights, vec![0.5, 0.25, 0.0]);
        assert!(l.check_features(2).is_ok());
        assert!(l.check_features(3).is_err());
    }
}
