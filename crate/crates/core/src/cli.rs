//! Command-line interface.
//!
//! Every flag can also be given in a flat `key=value` config file passed
//! with `--config`; keys are flag names with `-` or `_` separators. Flags on
//! the command line win over the file.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage, 3 I/O, 4 malformed
//! input, 5 invalid configuration or data, 6 optimizer failure.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bleu::corpus_bleu;
use crate::corpus::{build_vocabulary, load_nbest, LambdaVector, Phrase, Side};
use crate::error::{Error, Result};
use crate::gradcheck::{self, ToyProblem};
use crate::model::{encode, load_model, project, save_model, Arch, ModelParams, SimMode};
use crate::rerank::rerank;
use crate::scalar::Scalar;
use crate::synth::{synthgen, SynthSpec};
use crate::textio::join;
use crate::trainer::{self, load_checkpoint, TrainConfig, TuneConfig};

/// `println!` that reports a failed write instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(io::stdout(), $($arg)*).map_err(|e| Error::io("<stdout>", e))?
    };
}

pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_INVALID: i32 = 5;
pub const EXIT_OPTIMIZER: i32 = 6;

const SUBCOMMANDS: [&str; 7] = ["train", "rerank", "eval", "gradcheck", "synthgen", "tune-lambda", "export-embeddings"];

#[derive(Debug, Parser)]
#[command(name = "sptm", version, about = "Semantic phrase translation model: train, rerank, evaluate")]
struct Cli {
    /// key=value file supplying defaults for any flag
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for objective evaluation (0 = all cores); results do
    /// not depend on it
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the projection network on N-best lists by L-BFGS
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Rerank N-best lists with a trained model
    #[command(args_override_self = true)]
    Rerank(RerankArgs),
    /// Corpus BLEU of a hypothesis file against a reference file
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Finite-difference check of the analytic gradient
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic planted-semantics N-best task
    #[command(args_override_self = true)]
    Synthgen(SynthArgs),
    /// Tune log-linear weights on a development set
    #[command(args_override_self = true)]
    TuneLambda(TuneArgs),
    /// Print phrase embeddings as `phrase<TAB>v1 ... vk`
    #[command(args_override_self = true)]
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// N-best file: `id ||| tokens ||| features ||| derivation`
    #[arg(long)]
    nbest: PathBuf,
    /// Reference file: `id ||| source ||| reference`
    #[arg(long)]
    refs: PathBuf,
    /// Log-linear weights, one per line (M + 1 lines)
    #[arg(long)]
    lambda: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Training log (TSV)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint file, rewritten every --checkpoint-interval iterations
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    checkpoint_interval: usize,
    /// Continue from this checkpoint instead of a fresh initialization
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Stop when the gradient's max-norm reaches this value
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    /// Stop when the relative loss change over 3 iterations reaches this value
    #[arg(long, default_value_t = 1e-9)]
    rel_loss_tol: f64,
    /// Seed of the ChaCha8 generator used for initialization
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Hidden layer size k1
    #[arg(long, default_value_t = 100)]
    hidden: usize,
    /// Output layer size k2 (ignored by the linear architecture)
    #[arg(long, default_value_t = 100)]
    output: usize,
    #[arg(long, default_value = "nonlinear")]
    arch: Arch,
    /// dot or cosine; defaults to dot for nonlinear, cosine for linear
    #[arg(long)]
    sim_mode: Option<SimMode>,
    /// Score phrases by aggregated word-to-word similarity
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    word_level: bool,
    /// Model whose W1 initializes training (same vocabulary)
    #[arg(long)]
    init_model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// L-BFGS history size
    #[arg(long, default_value_t = 10)]
    history: usize,
    /// Weight of the similarity feature during training
    #[arg(long, default_value_t = 1.0)]
    sptm_weight: f64,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Debug, Args)]
struct RerankArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    /// Write `id ||| chosen` lines here; stdout otherwise
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// One hypothesis per line (the last `|||` field is used if present)
    #[arg(long)]
    hyp: PathBuf,
    /// One reference per line (the last `|||` field is used if present)
    #[arg(long = "ref", value_name = "REF")]
    reference: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of random toy problems
    #[arg(long, default_value_t = 20)]
    configs: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum accepted relative error
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Check on this corpus instead of random toy problems
    #[arg(long, requires_all = ["refs", "lambda"])]
    nbest: Option<PathBuf>,
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    output: usize,
    #[arg(long, default_value = "nonlinear")]
    arch: Arch,
    #[arg(long)]
    sim_mode: Option<SimMode>,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    word_level: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// File name prefix for .ref, .nbest and .lambda
    #[arg(long, default_value = "synth")]
    prefix: String,
    #[arg(long, default_value_t = 5)]
    concepts: usize,
    #[arg(long, default_value_t = 3)]
    phrases_per_concept: usize,
    #[arg(long, default_value_t = 200)]
    sentences: usize,
    #[arg(long, default_value_t = 4)]
    phrases_per_sentence: usize,
    #[arg(long, default_value_t = 8)]
    candidates: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    /// Output lambda file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    low: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    high: f64,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Export the phrases of this corpus; vocabulary words otherwise
    #[arg(long, requires = "refs")]
    nbest: Option<PathBuf>,
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn run(argv: &[String]) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_INVALID;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        // A closed downstream pipe (`sptm ... | head`) is not a failure.
        Err(Error::Io { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Parse { .. } | Error::DerivationMismatch { .. } | Error::FeatureCount { .. } | Error::ModelFormat(_) => {
            EXIT_FORMAT
        }
        Error::LambdaLength { .. } | Error::Dimension(_) | Error::Empty(_) | Error::Config(_) => EXIT_INVALID,
        Error::LineSearch { .. } => EXIT_OPTIMIZER,
    }
}

/// Splices `--key value` pairs from the `--config` file right after the
/// subcommand name, so that later command-line flags override them.
fn expand_config(argv: &[String]) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv.to_vec()) };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut extra = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.clone().into(),
            line: i + 1,
            message: "expected key=value".into(),
        })?;
        extra.push(format!("--{}", k.trim().replace('_', "-")));
        extra.push(v.trim().to_string());
    }
    let mut out = argv.to_vec();
    if let Some(pos) = out.iter().skip(1).position(|a| SUBCOMMANDS.contains(&a.as_str())) {
        let at = pos + 2;
        out.splice(at..at, extra);
    }
    Ok(out)
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train(a) => match a.precision {
            Precision::F64 => train_cmd::<f64>(&a),
            Precision::F32 => train_cmd::<f32>(&a),
        },
        Command::Rerank(a) => match model_scalar(&a.model)?.as_str() {
            "f32" => rerank_cmd::<f32>(&a),
            _ => rerank_cmd::<f64>(&a),
        },
        Command::Eval(a) => eval_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::Synthgen(a) => synth_cmd(&a),
        Command::TuneLambda(a) => match model_scalar(&a.model)?.as_str() {
            "f32" => tune_cmd::<f32>(&a),
            _ => tune_cmd::<f64>(&a),
        },
        Command::ExportEmbeddings(a) => match model_scalar(&a.model)?.as_str() {
            "f32" => export_cmd::<f32>(&a),
            _ => export_cmd::<f64>(&a),
        },
    }
}

/// Scalar tag stored in a model file header.
fn model_scalar(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("scalar "))
        .map(|s| s.trim().to_string())
        .ok_or_else(|| Error::ModelFormat(format!("{}: no scalar tag", path.display())))
}

fn load_corpus(c: &CorpusArgs) -> Result<(Vec<crate::TrainingSample>, LambdaVector)> {
    let samples = load_nbest(&c.nbest, &c.refs)?;
    let lambda = LambdaVector::load(&c.lambda)?;
    lambda.check_features(samples[0].num_features())?;
    Ok((samples, lambda))
}

fn train_cmd<T: Scalar>(a: &TrainArgs) -> Result<i32> {
    let (samples, lambda) = load_corpus(&a.corpus)?;
    let lambda = lambda.with_sptm(a.sptm_weight);
    let config = TrainConfig {
        max_iterations: a.max_iter,
        grad_tol: a.grad_tol,
        rel_loss_tol: a.rel_loss_tol,
        checkpoint_interval: a.checkpoint_interval,
        checkpoint_path: a.checkpoint.clone(),
        log_path: a.log.clone(),
        seed: a.seed,
        hidden: a.hidden,
        output: a.output,
        arch: a.arch,
        sim_mode: a.sim_mode.unwrap_or_else(|| a.arch.default_sim_mode()),
        word_level: a.word_level,
        init_model: a.init_model.clone(),
        weight_decay: a.weight_decay,
        history: a.history,
    };
    config.validate()?;
    let (outcome, vocab) = match &a.resume {
        Some(ckpt) => {
            let (_, vocab, _) = load_checkpoint::<T>(ckpt)?;
            (trainer::resume::<T>(ckpt, &samples, &config, &lambda)?, vocab)
        }
        None => {
            let vocab = match &config.init_model {
                Some(p) => load_model::<T>(p)?.1,
                None => build_vocabulary(&samples)?,
            };
            (trainer::train::<T>(&samples, &vocab, &config, &lambda)?, vocab)
        }
    };
    save_model(&outcome.params, &vocab, &a.out)?;
    let last = outcome.log.last();
    outln!("iterations\t{}", last.map_or(0, |r| r.iteration));
    outln!("stop\t{:?}", outcome.stop);
    outln!("initial_xbleu\t{:.6}", outcome.initial_xbleu());
    outln!("final_xbleu\t{:.6}", outcome.final_xbleu());
    outln!("model\t{}", a.out.display());
    Ok(0)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn rerank_cmd<T: Scalar>(a: &RerankArgs) -> Result<i32> {
    let (samples, lambda) = load_corpus(&a.corpus)?;
    let (params, vocab) = load_model::<T>(&a.model)?;
    let result = rerank(&samples, &params, &lambda, &vocab)?;
    let out_name = a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let io_err = |e| Error::io(&out_name, e);
    let mut out = open_out(a.out.as_deref())?;
    for (s, sel) in samples.iter().zip(&result.selections) {
        writeln!(out, "{} ||| {}", s.id, s.candidates[sel.index].tokens.join(" ")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    let summary = format!(
        "BLEU baseline\t{:.4}\nBLEU reranked\t{:.4}\nBLEU oracle\t{:.4}\nBLEU oracle-worst\t{:.4}",
        result.baseline_bleu, result.bleu, result.oracle_bleu, result.oracle_worst_bleu
    );
    if a.out.is_some() {
        outln!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(0)
}

fn read_segments(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let seg = l.rsplit("|||").next().unwrap_or("");
            seg.split_whitespace().map(str::to_lowercase).collect()
        })
        .collect())
}

fn eval_cmd(a: &EvalArgs) -> Result<i32> {
    let hyp = read_segments(&a.hyp)?;
    let refs = read_segments(&a.reference)?;
    if hyp.len() != refs.len() {
        return Err(Error::Config(format!("{} hypotheses but {} references", hyp.len(), refs.len())));
    }
    let pairs: Vec<(Vec<String>, Vec<String>)> = refs.into_iter().zip(hyp).collect();
    outln!("{:.4}", corpus_bleu(&pairs)?);
    Ok(0)
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<i32> {
    let reports = match (&a.nbest, &a.refs, &a.lambda) {
        (Some(nbest), Some(refs), Some(lambda)) => {
            let samples = load_nbest(nbest, refs)?;
            let lambda = LambdaVector::load(lambda)?;
            lambda.check_features(samples[0].num_features())?;
            let vocab = build_vocabulary(&samples)?;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
            let output = if a.arch == Arch::Linear { 0 } else { a.output };
            let sim = a.sim_mode.unwrap_or_else(|| a.arch.default_sim_mode());
            let params = ModelParams::random(vocab.len(), a.hidden, output, a.arch, sim, a.word_level, &mut rng);
            let problem = ToyProblem { samples, vocab, lambda, params };
            vec![(0, gradcheck::check(&problem, a.step)?)]
        }
        _ => gradcheck::run_random(a.seed, a.configs, a.step)?,
    };
    let mut max: f64 = 0.0;
    for (i, r) in &reports {
        outln!("config {i}\tentries {}\tmax_rel_error {:.3e}", r.entries, r.max_rel_error);
        max = max.max(r.max_rel_error);
    }
    outln!("max relative error: {max:.3e} (tolerance {:.1e})", a.tol);
    Ok(if max <= a.tol { 0 } else { EXIT_CHECK_FAILED })
}

fn synth_cmd(a: &SynthArgs) -> Result<i32> {
    let spec = SynthSpec {
        concepts: a.concepts,
        phrases_per_concept: a.phrases_per_concept,
        sentences: a.sentences,
        phrases_per_sentence: a.phrases_per_sentence,
        candidates: a.candidates,
        noise: a.noise,
        seed: a.seed,
    };
    let paths = synthgen(&spec, &a.out_dir, &a.prefix)?;
    outln!("{}", paths.references.display());
    outln!("{}", paths.nbest.display());
    outln!("{}", paths.lambda.display());
    Ok(0)
}

fn tune_cmd<T: Scalar>(a: &TuneArgs) -> Result<i32> {
    let (samples, lambda) = load_corpus(&a.corpus)?;
    let (params, vocab) = load_model::<T>(&a.model)?;
    if !(a.low < a.high) {
        return Err(Error::Config("--low must be below --high".into()));
    }
    let config = TuneConfig { low: a.low, high: a.high, ..TuneConfig::default() };
    let result = trainer::tune_lambda(&samples, &params, &vocab, &lambda, &config)?;
    result.lambda.save(&a.out)?;
    outln!("BLEU initial\t{:.4}", result.initial_bleu);
    outln!("BLEU tuned\t{:.4}", result.bleu);
    outln!("sweeps\t{}", result.sweeps);
    Ok(0)
}

fn export_cmd<T: Scalar>(a: &ExportArgs) -> Result<i32> {
    let (params, vocab) = load_model::<T>(&a.model)?;
    let phrases: Vec<Vec<String>> = match (&a.nbest, &a.refs) {
        (Some(nbest), Some(refs)) => {
            let samples = load_nbest(nbest, refs)?;
            let set: BTreeSet<Vec<String>> = crate::corpus::collect_phrase_pairs(&samples)
                .into_iter()
                .flat_map(|p| [p.pair.source.tokens, p.pair.target.tokens])
                .collect();
            set.into_iter().collect()
        }
        _ => vocab.tokens().iter().skip(1).map(|t| vec![t.clone()]).collect(),
    };
    let name = a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut out = open_out(a.out.as_deref())?;
    for tokens in phrases {
        let trace = project(&encode(&Phrase { side: Side::Source, tokens: tokens.clone() }, &vocab), &params)?;
        writeln!(out, "{}\t{}", tokens.join(" "), join(trace.output())).map_err(|e| Error::io(&name, e))?;
    }
    out.flush().map_err(|e| Error::io(&name, e))?;
    Ok(0)
}
