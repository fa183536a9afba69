//! Bag-of-words phrase encoding, the two-layer tanh projection and the
//! phrase similarity used as the translation feature.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::bleu;
use crate::corpus::{Phrase, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot, norm, Scalar};
use crate::textio::{join, write_atomic, LineCursor};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Default hidden and output layer sizes.
pub const DEFAULT_HIDDEN: usize = 100;
pub const DEFAULT_OUTPUT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    /// `y = tanh(W2^T tanh(W1^T x))`
    Nonlinear,
    /// `y = W1^T x`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimMode {
    Dot,
    Cosine,
}

impl Arch {
    /// Dot product for the nonlinear network, cosine for the linear one.
    pub fn default_sim_mode(self) -> SimMode {
        match self {
            Arch::Nonlinear => SimMode::Dot,
            Arch::Linear => SimMode::Cosine,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Nonlinear => "nonlinear",
            Arch::Linear => "linear",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nonlinear" => Ok(Arch::Nonlinear),
            "linear" => Ok(Arch::Linear),
            _ => Err(format!("unknown architecture {s:?} (expected nonlinear|linear)")),
        }
    }
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimMode::Dot => "dot",
            SimMode::Cosine => "cosine",
        })
    }
}

impl FromStr for SimMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dot" => Ok(SimMode::Dot),
            "cosine" => Ok(SimMode::Cosine),
            _ => Err(format!("unknown similarity {s:?} (expected dot|cosine)")),
        }
    }
}

/// Sparse bag-of-words count vector, entries sorted by index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WordVector {
    dim: usize,
    entries: Vec<(usize, u32)>,
}

impl WordVector {
    pub fn from_indices(dim: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut idx: Vec<usize> = indices.into_iter().collect();
        idx.sort_unstable();
        let mut entries: Vec<(usize, u32)> = Vec::new();
        for i in idx {
            match entries.last_mut() {
                Some((j, c)) if *j == i => *c += 1,
                _ => entries.push((i, 1)),
            }
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    pub fn count(&self, index: usize) -> u32 {
        self.entries.binary_search_by_key(&index, |e| e.0).map_or(0, |p| self.entries[p].1)
    }

    pub fn total(&self) -> u32 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn to_dense<T: Scalar>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim];
        for &(i, c) in &self.entries {
            v[i] = T::of(c as f64);
        }
        v
    }
}

pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> WordVector {
    WordVector::from_indices(vocab.len(), tokens.iter().map(|t| vocab.index_of(t.as_ref())))
}

/// Bag-of-words counts of `phrase`; unknown tokens count towards UNK.
pub fn encode(phrase: &Phrase, vocab: &Vocabulary) -> WordVector {
    encode_tokens(&phrase.tokens, vocab)
}

/// Projection network parameters `θ = {W1, W2}` plus the variant flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `d × k1`
    pub w1: Matrix<T>,
    /// `k1 × k2`; empty for [`Arch::Linear`].
    pub w2: Matrix<T>,
    pub arch: Arch,
    pub sim_mode: SimMode,
    /// Score phrases by aggregated word-to-word similarities.
    pub word_level: bool,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(d: usize, k1: usize, k2: usize, arch: Arch, sim_mode: SimMode, word_level: bool) -> Self {
        let w2 = match arch {
            Arch::Nonlinear => Matrix::zeros(k1, k2),
            Arch::Linear => Matrix::empty(),
        };
        Self { w1: Matrix::zeros(d, k1), w2, arch, sim_mode, word_level }
    }

    /// Uniform `[-r, r]` initialization with `r = sqrt(6 / (fan_in + fan_out))`,
    /// drawing W1 then W2 in row-major order.
    pub fn random<R: Rng>(
        d: usize,
        k1: usize,
        k2: usize,
        arch: Arch,
        sim_mode: SimMode,
        word_level: bool,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(d, k1, k2, arch, sim_mode, word_level);
        fill_uniform(&mut p.w1, rng);
        fill_uniform(&mut p.w2, rng);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        match self.arch {
            Arch::Nonlinear => self.w2.cols(),
            Arch::Linear => self.w1.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.arch {
            Arch::Nonlinear if self.w2.rows() != self.w1.cols() || self.w2.is_empty() => {
                return Err(Error::Dimension(format!(
                    "W2 is {:?} but W1 has {} columns",
                    self.w2.shape(),
                    self.w1.cols()
                )))
            }
            Arch::Linear if !self.w2.is_empty() => {
                return Err(Error::Dimension("linear architecture stores no W2".into()))
            }
            _ => {}
        }
        if !self.w1.all_finite() || !self.w2.all_finite() {
            return Err(Error::Dimension("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.w1.as_slice().len() + self.w2.as_slice().len()
    }

    /// W1 then W2, row-major.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(self.w2.as_slice());
        v
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params(), "parameter vector length");
        let n1 = self.w1.as_slice().len();
        self.w1.as_mut_slice().copy_from_slice(&flat[..n1]);
        self.w2.as_mut_slice().copy_from_slice(&flat[n1..]);
    }

    pub fn with_flat(&self, flat: &[T]) -> Self {
        let mut p = self.clone();
        p.set_flat(flat);
        p
    }
}

fn fill_uniform<T: Scalar, R: Rng>(m: &mut Matrix<T>, rng: &mut R) {
    if m.is_empty() {
        return;
    }
    let r = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
    for v in m.as_mut_slice() {
        *v = T::of(rng.random_range(-r..=r));
    }
}

/// Intermediate activations of one projection.
///
/// For the linear architecture `y1 = z1` is the output and `z2`, `y2` are
/// empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub z1: Vec<T>,
    pub y1: Vec<T>,
    pub z2: Vec<T>,
    pub y2: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// The phrase's point in the semantic space.
    pub fn output(&self) -> &[T] {
        if self.y2.is_empty() && self.z2.is_empty() {
            &self.y1
        } else {
            &self.y2
        }
    }
}

pub fn project<T: Scalar>(x: &WordVector, params: &ModelParams<T>) -> Result<ForwardTrace<T>> {
    if x.dim() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "word vector has dimension {} but W1 has {} rows",
            x.dim(),
            params.input_dim()
        )));
    }
    let k1 = params.hidden_dim();
    let mut z1 = vec![T::zero(); k1];
    for &(i, c) in x.entries() {
        let c = T::of(c as f64);
        for (z, &w) in z1.iter_mut().zip(params.w1.row(i)) {
            *z = *z + c * w;
        }
    }
    Ok(match params.arch {
        Arch::Linear => ForwardTrace { y1: z1.clone(), z1, z2: Vec::new(), y2: Vec::new() },
        Arch::Nonlinear => {
            let y1: Vec<T> = z1.iter().map(|z| z.tanh()).collect();
            let z2 = params.w2.transpose_mul(&y1);
            let y2 = z2.iter().map(|z| z.tanh()).collect();
            ForwardTrace { z1, y1, z2, y2 }
        }
    })
}

/// Similarity of two projected vectors. Cosine is 0 when either norm is 0.
pub fn vector_similarity<T: Scalar>(a: &[T], b: &[T], mode: SimMode) -> T {
    let d = dot(a, b);
    match mode {
        SimMode::Dot => d,
        SimMode::Cosine => {
            let n = norm(a) * norm(b);
            if n == T::zero() {
                T::zero()
            } else {
                d / n
            }
        }
    }
}

/// Word-level aggregation over a `|f| × |e|` matrix of token similarities:
/// half the mean over rows of the row maxima plus half the mean over
/// columns of the column maxima.
pub fn mean_of_max<T: Scalar>(sims: &[Vec<T>]) -> T {
    let rows = sims.len();
    let cols = sims.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return T::zero();
    }
    let half = T::of(0.5);
    let row_part: T = sims.iter().map(|r| r[argmax(r)]).sum::<T>() / T::of_usize(rows);
    let col_part: T = (0..cols).map(|j| sims[column_argmax(sims, j)][j]).sum::<T>() / T::of_usize(cols);
    half * row_part + half * col_part
}

/// First index of the maximum.
pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn column_argmax<T: Scalar>(m: &[Vec<T>], col: usize) -> usize {
    let mut best = 0;
    for i in 1..m.len() {
        if m[i][col] > m[best][col] {
            best = i;
        }
    }
    best
}

/// `sim_θ(x_f, x_e)` for a source and a target phrase.
pub fn similarity<T: Scalar>(f: &Phrase, e: &Phrase, params: &ModelParams<T>, vocab: &Vocabulary) -> Result<T> {
    if params.word_level {
        let fo = token_outputs(&f.tokens, params, vocab)?;
        let eo = token_outputs(&e.tokens, params, vocab)?;
        let sims: Vec<Vec<T>> =
            fo.iter().map(|u| eo.iter().map(|v| vector_similarity(u, v, params.sim_mode)).collect()).collect();
        Ok(mean_of_max(&sims))
    } else {
        let yf = project(&encode(f, vocab), params)?;
        let ye = project(&encode(e, vocab), params)?;
        Ok(vector_similarity(yf.output(), ye.output(), params.sim_mode))
    }
}

fn token_outputs<T: Scalar>(tokens: &[String], params: &ModelParams<T>, vocab: &Vocabulary) -> Result<Vec<Vec<T>>> {
    tokens
        .iter()
        .map(|t| {
            let x = WordVector::from_indices(vocab.len(), [vocab.index_of(t)]);
            project(&x, params).map(|tr| tr.output().to_vec())
        })
        .collect()
}

/// Serializes parameters and vocabulary into the text model format.
pub(crate) fn write_model_text<T: Scalar>(out: &mut String, params: &ModelParams<T>, vocab: &Vocabulary) {
    use std::fmt::Write;
    let k2 = match params.arch {
        Arch::Nonlinear => params.w2.cols(),
        Arch::Linear => 0,
    };
    let _ = writeln!(out, "sptm-model {MODEL_FORMAT_VERSION}");
    let _ = writeln!(out, "scalar {}", T::NAME);
    let _ = writeln!(out, "d {}", params.input_dim());
    let _ = writeln!(out, "k1 {}", params.hidden_dim());
    let _ = writeln!(out, "k2 {k2}");
    let _ = writeln!(out, "arch {}", params.arch);
    let _ = writeln!(out, "sim_mode {}", params.sim_mode);
    let _ = writeln!(out, "word_level {}", params.word_level);
    let _ = writeln!(out, "bleu_smoothing {}", bleu::SMOOTHING_TAG);
    out.push_str("vocab\n");
    for t in vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    out.push_str("w1\n");
    for r in 0..params.w1.rows() {
        out.push_str(&join(params.w1.row(r)));
        out.push('\n');
    }
    out.push_str("w2\n");
    for r in 0..params.w2.rows() {
        out.push_str(&join(params.w2.row(r)));
        out.push('\n');
    }
}

pub(crate) fn read_model_text<T: Scalar>(cur: &mut LineCursor<'_>) -> Result<(ModelParams<T>, Vocabulary)> {
    let version: u32 = cur.parsed("sptm-model")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(cur.err(format!("unsupported model version {version}")));
    }
    let scalar = cur.field("scalar")?;
    if scalar != T::NAME {
        return Err(cur.err(format!("model stores {scalar} but {} was requested", T::NAME)));
    }
    let d: usize = cur.parsed("d")?;
    let k1: usize = cur.parsed("k1")?;
    let k2: usize = cur.parsed("k2")?;
    let arch: Arch = cur.parsed("arch")?;
    let sim_mode: SimMode = cur.parsed("sim_mode")?;
    let word_level: bool = cur.parsed("word_level")?;
    let smoothing = cur.field("bleu_smoothing")?;
    if smoothing != bleu::SMOOTHING_TAG {
        return Err(cur.err(format!("unknown BLEU smoothing {smoothing:?}")));
    }
    if d == 0 || k1 == 0 || (arch == Arch::Nonlinear) != (k2 > 0) {
        return Err(cur.err(format!("invalid shape d={d} k1={k1} k2={k2} for {arch} model")));
    }
    cur.expect("vocab")?;
    let mut tokens = Vec::with_capacity(d);
    for _ in 0..d {
        tokens.push(cur.next_line()?.to_string());
    }
    let vocab = Vocabulary::from_ordered(tokens)?;
    cur.expect("w1")?;
    let mut w1 = Vec::with_capacity(d * k1);
    for _ in 0..d {
        w1.extend(cur.values::<T>(k1)?);
    }
    cur.expect("w2")?;
    let rows2 = if k2 > 0 { k1 } else { 0 };
    let mut w2 = Vec::with_capacity(rows2 * k2);
    for _ in 0..rows2 {
        w2.extend(cur.values::<T>(k2)?);
    }
    let params = ModelParams {
        w1: Matrix::from_vec(d, k1, w1),
        w2: Matrix::from_vec(rows2, k2, w2),
        arch,
        sim_mode,
        word_level,
    };
    params.validate()?;
    Ok((params, vocab))
}

/// Writes a model file (atomically) holding the parameters and the
/// vocabulary that indexes W1's rows.
pub fn save_model<T: Scalar>(params: &ModelParams<T>, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    if params.input_dim() != vocab.len() {
        return Err(Error::Dimension(format!("W1 has {} rows, vocabulary {}", params.input_dim(), vocab.len())));
    }
    let mut out = String::new();
    write_model_text(&mut out, params, vocab);
    out.push_str("end\n");
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<T>, Vocabulary)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cur = LineCursor::new(&text);
    let model = read_model_text(&mut cur)?;
    cur.expect("end")?;
    Ok(model)
}
