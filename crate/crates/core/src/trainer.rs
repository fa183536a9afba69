//! Batch L-BFGS training of the projection network at fixed log-linear
//! weights, checkpointing, and coordinate-ascent tuning of the weights.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{LambdaVector, TrainingSample, Vocabulary};
use crate::error::{Error, Result};
use crate::lbfgs::{lbfgs_step, Convergence, LbfgsConfig, LbfgsState, StepOutcome};
use crate::model::{load_model, read_model_text, write_model_text, Arch, ModelParams, SimMode};
use crate::objective::Objective;
use crate::rerank::{candidate_stats, feature_table, select, selection_bleu};
use crate::scalar::{norm_inf, Scalar};
use crate::textio::{join, write_atomic, LineCursor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_iterations: usize,
    /// Stop when `‖∇L‖∞` reaches this value.
    pub grad_tol: f64,
    /// Stop when the relative loss change over 3 iterations reaches this.
    pub rel_loss_tol: f64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_interval: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// TSV log `iter loss xbleu gradnorm seconds`.
    pub log_path: Option<PathBuf>,
    /// Seeds the ChaCha8 generator used for weight initialization.
    pub seed: u64,
    pub hidden: usize,
    pub output: usize,
    pub arch: Arch,
    pub sim_mode: SimMode,
    pub word_level: bool,
    /// Model whose W1 initializes training (e.g. a linear pre-trained model).
    pub init_model: Option<PathBuf>,
    pub weight_decay: f64,
    pub history: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            grad_tol: 1e-6,
            rel_loss_tol: 1e-9,
            checkpoint_interval: 0,
            checkpoint_path: None,
            log_path: None,
            seed: 1,
            hidden: crate::model::DEFAULT_HIDDEN,
            output: crate::model::DEFAULT_OUTPUT,
            arch: Arch::Nonlinear,
            sim_mode: SimMode::Dot,
            word_level: false,
            init_model: None,
            weight_decay: 0.0,
            history: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Config("max iterations must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0) || !(self.rel_loss_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.hidden == 0 || (self.arch == Arch::Nonlinear && self.output == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.history == 0 {
            return Err(Error::Config("L-BFGS history must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.checkpoint_interval > 0 && self.checkpoint_path.is_none() {
            return Err(Error::Config("checkpoint interval set without a checkpoint path".into()));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            history: self.history,
            grad_tol: self.grad_tol,
            rel_loss_tol: self.rel_loss_tol,
            ..LbfgsConfig::default()
        }
    }

    /// Seeded initial parameters, optionally taking W1 from `init_model`.
    pub fn initial_params<T: Scalar>(&self, vocab: &Vocabulary) -> Result<ModelParams<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut params = ModelParams::random(
            vocab.len(),
            self.hidden,
            self.output,
            self.arch,
            self.sim_mode,
            self.word_level,
            &mut rng,
        );
        if let Some(path) = &self.init_model {
            let (init, init_vocab) = load_model::<T>(path)?;
            if &init_vocab != vocab {
                return Err(Error::Config("initial model uses a different vocabulary".into()));
            }
            if init.w1.shape() != params.w1.shape() {
                return Err(Error::Dimension(format!(
                    "initial model W1 is {:?}, expected {:?}",
                    init.w1.shape(),
                    params.w1.shape()
                )));
            }
            params.w1 = init.w1;
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub xbleu: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

impl LogRecord {
    pub const HEADER: &'static str = "iter\tloss\txbleu\tgradnorm\tseconds";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{:.3}", self.iteration, self.loss, self.xbleu, self.grad_norm, self.seconds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged(Convergence),
    MaxIterations,
    /// The line search gave up; parameters are the last accepted iterate.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub log: Vec<LogRecord>,
    pub stop: StopReason,
}

impl<T> TrainOutcome<T> {
    pub fn initial_xbleu(&self) -> f64 {
        self.log.first().map_or(f64::NAN, |r| r.xbleu)
    }

    pub fn final_xbleu(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.xbleu)
    }
}

struct LogSink {
    out: Option<BufWriter<fs::File>>,
    path: Option<PathBuf>,
}

impl LogSink {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        let Some(path) = path else { return Ok(Self { out: None, path: None }) };
        let file = if append {
            fs::OpenOptions::new().append(true).create(true).open(path)
        } else {
            fs::File::create(path)
        }
        .map_err(|e| Error::io(path, e))?;
        let mut sink = Self { out: Some(BufWriter::new(file)), path: Some(path.into()) };
        if !append {
            sink.line(LogRecord::HEADER)?;
        }
        Ok(sink)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        if let (Some(out), Some(path)) = (self.out.as_mut(), self.path.as_ref()) {
            writeln!(out, "{text}").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Trains θ by batch L-BFGS on `-mean xBleu` with `lambda` held fixed.
pub fn train<T: Scalar>(
    samples: &[TrainingSample],
    vocab: &Vocabulary,
    config: &TrainConfig,
    lambda: &LambdaVector,
) -> Result<TrainOutcome<T>> {
    let params = config.initial_params::<T>(vocab)?;
    if config.max_iterations == 0 {
        return Ok(TrainOutcome { params, log: Vec::new(), stop: StopReason::MaxIterations });
    }
    let objective = Objective::with_weight_decay(samples, vocab, lambda, config.weight_decay)?;
    let mut runner = Runner::new(&objective, params);
    let state = LbfgsState::new(runner.params.to_flat(), config.lbfgs(), &mut |x: &[T]| runner.eval(x))?;
    let mut sink = LogSink::open(config.log_path.as_deref(), false)?;
    let first = LogRecord {
        iteration: 0,
        loss: state.loss.as_f64(),
        xbleu: runner.last_xbleu.as_f64(),
        grad_norm: norm_inf(&state.grad).as_f64(),
        seconds: 0.0,
    };
    sink.line(&first.to_tsv())?;
    run(runner, state, vocab, config, vec![first], sink, Instant::now())
}

/// Continues training from a checkpoint written by [`train`]. The
/// iteration limit counts from the start of the original run.
pub fn resume<T: Scalar>(
    checkpoint: impl AsRef<Path>,
    samples: &[TrainingSample],
    config: &TrainConfig,
    lambda: &LambdaVector,
) -> Result<TrainOutcome<T>> {
    let (params, vocab, mut state) = load_checkpoint::<T>(checkpoint)?;
    state.config = config.lbfgs();
    let objective = Objective::with_weight_decay(samples, &vocab, lambda, config.weight_decay)?;
    let runner = Runner::new(&objective, params);
    let sink = LogSink::open(config.log_path.as_deref(), true)?;
    run(runner, state, &vocab, config, Vec::new(), sink, Instant::now())
}

struct Runner<'a, T> {
    objective: &'a Objective<T>,
    params: ModelParams<T>,
    last_xbleu: T,
}

impl<'a, T: Scalar> Runner<'a, T> {
    fn new(objective: &'a Objective<T>, params: ModelParams<T>) -> Self {
        Self { objective, params, last_xbleu: T::nan() }
    }

    fn eval(&mut self, x: &[T]) -> Result<(T, Vec<T>)> {
        self.params.set_flat(x);
        if !self.params.w1.all_finite() || !self.params.w2.all_finite() {
            return Ok((T::nan(), vec![T::nan(); x.len()]));
        }
        let ev = self.objective.evaluate(&self.params)?;
        self.last_xbleu = ev.xbleu;
        Ok((ev.loss, ev.grad.to_flat()))
    }
}

fn run<T: Scalar>(
    mut runner: Runner<'_, T>,
    mut state: LbfgsState<T>,
    vocab: &Vocabulary,
    config: &TrainConfig,
    mut log: Vec<LogRecord>,
    mut sink: LogSink,
    start: Instant,
) -> Result<TrainOutcome<T>> {
    let template = runner.params.clone();
    let mut stop = StopReason::MaxIterations;
    while state.iteration < config.max_iterations {
        match lbfgs_step(&mut state, &mut |x: &[T]| runner.eval(x)) {
            Ok(StepOutcome::Converged(c)) => {
                stop = StopReason::Converged(c);
                break;
            }
            Ok(StepOutcome::Stepped) => {}
            Err(Error::LineSearch { evaluations }) => {
                log::warn!("line search failed after {evaluations} evaluations; keeping last iterate");
                stop = StopReason::LineSearchFailed;
                break;
            }
            Err(e) => return Err(e),
        }
        // the accepted point is always the line search's last evaluation
        let rec = LogRecord {
            iteration: state.iteration,
            loss: state.loss.as_f64(),
            xbleu: runner.last_xbleu.as_f64(),
            grad_norm: norm_inf(&state.grad).as_f64(),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("iter {} loss {:.6} xbleu {:.6} |g| {:.3e}", rec.iteration, rec.loss, rec.xbleu, rec.grad_norm);
        sink.line(&rec.to_tsv())?;
        log.push(rec);
        if config.checkpoint_interval > 0 && state.iteration.is_multiple_of(config.checkpoint_interval) {
            if let Some(path) = &config.checkpoint_path {
                save_checkpoint(&template.with_flat(&state.x), vocab, &state, path)?;
            }
        }
    }
    if stop == StopReason::MaxIterations {
        if let Some(c) = state.converged() {
            stop = StopReason::Converged(c);
        }
    }
    Ok(TrainOutcome { params: template.with_flat(&state.x), log, stop })
}

/// Model file followed by the optimizer state, written atomically.
pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    state: &LbfgsState<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = String::new();
    write_model_text(&mut out, params, vocab);
    out.push_str("optimizer\n");
    out.push_str(&format!("iteration {}\n", state.iteration));
    out.push_str(&format!("evaluations {}\n", state.evaluations));
    out.push_str(&format!("loss {}\n", state.loss));
    out.push_str(&format!("grad {}\n", join(&state.grad)));
    out.push_str(&format!("losses {}\n", state.losses.len()));
    out.push_str(&join(&state.losses));
    out.push('\n');
    out.push_str(&format!("pairs {}\n", state.s_hist.len()));
    for (s, y) in state.s_hist.iter().zip(&state.y_hist) {
        out.push_str(&join(s));
        out.push('\n');
        out.push_str(&join(y));
        out.push('\n');
    }
    out.push_str("end\n");
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<T>, Vocabulary, LbfgsState<T>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cur = LineCursor::new(&text);
    let (params, vocab) = read_model_text::<T>(&mut cur)?;
    let n = params.num_params();
    cur.expect("optimizer")?;
    let iteration: usize = cur.parsed("iteration")?;
    let evaluations: usize = cur.parsed("evaluations")?;
    let loss: T = cur.parsed("loss")?;
    let grad_text = cur.field("grad")?;
    let grad = parse_values::<T>(&cur, grad_text, n)?;
    let count: usize = cur.parsed("losses")?;
    let losses = cur.values::<T>(count)?;
    let pairs: usize = cur.parsed("pairs")?;
    let mut state = LbfgsState {
        config: LbfgsConfig::default(),
        x: params.to_flat(),
        loss,
        grad,
        s_hist: Default::default(),
        y_hist: Default::default(),
        iteration,
        losses,
        evaluations,
    };
    for _ in 0..pairs {
        state.s_hist.push_back(cur.values::<T>(n)?);
        state.y_hist.push_back(cur.values::<T>(n)?);
    }
    cur.expect("end")?;
    Ok((params, vocab, state))
}

fn parse_values<T: Scalar>(cur: &LineCursor<'_>, text: &str, expected: usize) -> Result<Vec<T>> {
    let vals = text
        .split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| cur.err(format!("bad number {t:?}"))))
        .collect::<Result<Vec<T>>>()?;
    if vals.len() != expected {
        return Err(cur.err(format!("shape mismatch: expected {expected} values, found {}", vals.len())));
    }
    Ok(vals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    /// Search interval for every weight.
    pub low: f64,
    pub high: f64,
    /// Coarse grid points used to bracket the golden-section search.
    pub grid: usize,
    pub golden_iterations: usize,
    /// Minimum corpus-BLEU gain for a coordinate move to be accepted.
    pub min_gain: f64,
    pub max_sweeps: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self { low: -5.0, high: 5.0, grid: 41, golden_iterations: 40, min_gain: 1e-6, max_sweeps: 25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub lambda: LambdaVector,
    pub bleu: f64,
    pub initial_bleu: f64,
    pub sweeps: usize,
}

/// Coordinate ascent on dev-set corpus BLEU of the argmax selection,
/// one bracketed golden-section search per weight, with θ fixed.
pub fn tune_lambda<T: Scalar>(
    dev: &[TrainingSample],
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    lambda_init: &LambdaVector,
    config: &TuneConfig,
) -> Result<TuneResult> {
    if dev.is_empty() {
        return Err(Error::Empty("development samples"));
    }
    for s in dev {
        lambda_init.check_features(s.num_features())?;
    }
    let features = feature_table(dev, params, vocab)?;
    Ok(tune_on_features(dev, &features, lambda_init, config))
}

/// [`tune_lambda`] over precomputed feature vectors.
pub fn tune_on_features(
    dev: &[TrainingSample],
    features: &[Vec<Vec<f64>>],
    lambda_init: &LambdaVector,
    config: &TuneConfig,
) -> TuneResult {
    let stats = candidate_stats(dev);
    let bleu_of = |w: &[f64]| -> f64 {
        let choice: Vec<usize> = features.iter().map(|f| select(f, w)).collect();
        selection_bleu(&stats, &choice)
    };
    let mut weights = lambda_init.weights.clone();
    let initial_bleu = bleu_of(&weights);
    let mut current = initial_bleu;
    let mut sweeps = 0;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let mut improved = false;
        for k in 0..weights.len() {
            let mut probe = weights.clone();
            let mut eval = |w: f64| {
                probe[k] = w;
                bleu_of(&probe)
            };
            let (w, b) = line_maximize(&mut eval, config);
            if b > current + config.min_gain {
                weights[k] = w;
                current = b;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    TuneResult { lambda: LambdaVector::new(weights), bleu: current, initial_bleu, sweeps }
}

/// Best point of a one-dimensional function on `[low, high]`: a coarse grid
/// brackets the best cell, golden-section search refines inside it. Ties
/// keep the earliest point found.
fn line_maximize(f: &mut impl FnMut(f64) -> f64, config: &TuneConfig) -> (f64, f64) {
    let n = config.grid.max(2);
    let step = (config.high - config.low) / (n - 1) as f64;
    let mut best = (config.low, f(config.low));
    for i in 1..n {
        let w = config.low + step * i as f64;
        let b = f(w);
        if b > best.1 {
            best = (w, b);
        }
    }
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = (best.0 - step).max(config.low);
    let mut b = (best.0 + step).min(config.high);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..config.golden_iterations {
        for (w, v) in [(c, fc), (d, fd)] {
            if v > best.1 {
                best = (w, v);
            }
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    for (w, v) in [(c, fc), (d, fd)] {
        if v > best.1 {
            best = (w, v);
        }
    }
    best
}
