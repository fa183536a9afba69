use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sptm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sptm")).args(args).current_dir(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, prefix: &str, seed: &str, extra: &[&str]) {
    let mut args = vec!["synthgen", "--out-dir", ".", "--prefix", prefix, "--seed", seed];
    args.extend_from_slice(extra);
    assert!(sptm(&args, dir).status.success());
}

#[test]
fn eval_of_identical_files_is_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("h"), "0 ||| the cat sat on the mat\n1 ||| a b c d e\n").unwrap();
    fs::write(dir.path().join("r"), "The cat sat on the mat\na b c d e\n").unwrap();
    let o = sptm(&["eval", "--hyp", "h", "--ref", "r"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "1.0000");
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = sptm(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = sptm(&["eval", "--hyp", "h", "--ref", "r", "--bogus", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let help = stdout(&sptm(&["train", "--help"], dir.path()));
    for flag in ["--nbest", "--refs", "--lambda", "--seed", "--max-iter", "--arch", "--sim-mode", "--threads"] {
        assert!(help.contains(flag), "help lacks {flag}");
    }
}

#[test]
fn error_kinds_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = sptm(&["eval", "--hyp", "missing", "--ref", "missing"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
    fs::write(dir.path().join("r"), "0 ||| a ||| b\n").unwrap();
    fs::write(dir.path().join("n"), "0 ||| b ||| 1 ||| [ a # c ]\n").unwrap();
    fs::write(dir.path().join("l"), "1\n1\n").unwrap();
    let o = sptm(&["train", "--nbest", "n", "--refs", "r", "--lambda", "l", "--out", "m"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    fs::write(dir.path().join("n"), "0 ||| b ||| 1 ||| [ a # b ]\n").unwrap();
    fs::write(dir.path().join("l"), "1\n1\n1\n").unwrap();
    let o = sptm(&["train", "--nbest", "n", "--refs", "r", "--lambda", "l", "--out", "m"], dir.path());
    assert_eq!(o.status.code(), Some(5));
    let o = sptm(&["train", "--nbest", "n", "--refs", "r", "--lambda", "l", "--out", "m", "--max-iter", "0"], dir.path());
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn gradcheck_passes_and_fails_on_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = sptm(&["gradcheck", "--seed", "7"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("max relative error"));
    let o = sptm(&["gradcheck", "--seed", "7", "--configs", "2", "--tol", "1e-30"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synthgen_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a", "3", &[]);
    synth(dir.path(), "b", "3", &[]);
    let read = |n: &str| fs::read_to_string(dir.path().join(n)).unwrap();
    assert_eq!(read("a.ref").lines().count(), 200);
    assert_eq!(read("a.nbest").lines().count(), 200 * 8);
    assert_eq!(read("a.lambda").lines().count(), 4);
    for ext in ["ref", "nbest", "lambda"] {
        assert_eq!(read(&format!("a.{ext}")), read(&format!("b.{ext}")));
    }
    synth(dir.path(), "c", "4", &[]);
    assert_ne!(read("a.nbest"), read("c.nbest"));
}

#[test]
fn noiseless_synthetic_task_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "z", "1", &["--noise", "0", "--sentences", "20"]);
    let train = ["train", "--nbest", "z.nbest", "--refs", "z.ref", "--lambda", "z.lambda", "--out", "m", "--hidden", "4", "--output", "4"];
    assert!(sptm(&train, dir.path()).status.success());
    let o = sptm(&["rerank", "--nbest", "z.nbest", "--refs", "z.ref", "--lambda", "z.lambda", "--model", "m", "--out", "sel"], dir.path());
    let summary = stdout(&o);
    assert!(summary.contains("BLEU baseline\t1.0000"), "{summary}");
    assert!(summary.contains("BLEU oracle\t1.0000"), "{summary}");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "t", "5", &["--sentences", "30"]);
    fs::write(
        dir.path().join("cfg"),
        "# training setup\nnbest = t.nbest\nrefs=t.ref\nlambda=t.lambda\nhidden=3\noutput=2\nmax_iter=2\nout=from-config\n",
    )
    .unwrap();
    let o = sptm(&["--config", "cfg", "train", "--out", "from-flag"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("from-config").exists());
    let model = fs::read_to_string(dir.path().join("from-flag")).unwrap();
    assert!(model.contains("k1 3\n") && model.contains("k2 2\n"), "{model}");
    fs::write(dir.path().join("bad"), "nbest=t.nbest\nno-such-key=1\n").unwrap();
    assert_eq!(sptm(&["--config", "bad", "train"], dir.path()).status.code(), Some(2));
}

#[test]
fn train_tune_rerank_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "train", "11", &["--sentences", "60"]);
    synth(d, "dev", "12", &["--sentences", "40"]);
    synth(d, "test", "13", &["--sentences", "40"]);
    let o = sptm(
        &["train", "--nbest", "train.nbest", "--refs", "train.ref", "--lambda", "train.lambda", "--out", "m", "--log", "log", "--hidden", "16", "--output", "16", "--checkpoint", "ck", "--checkpoint-interval", "2"],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(d.join("log")).unwrap();
    assert!(log.starts_with("iter\tloss\txbleu\tgradnorm\tseconds\n"));
    assert!(d.join("ck").exists());

    let o = sptm(&["tune-lambda", "--nbest", "dev.nbest", "--refs", "dev.ref", "--lambda", "train.lambda", "--model", "m", "--out", "tuned"], d);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(d.join("tuned")).unwrap().lines().count(), 4);

    let o = sptm(&["rerank", "--nbest", "test.nbest", "--refs", "test.ref", "--lambda", "tuned", "--model", "m"], d);
    assert!(o.status.success());
    let selections = stdout(&o);
    assert_eq!(selections.lines().count(), 40);
    assert!(selections.starts_with("0 ||| "));
    let summary = String::from_utf8_lossy(&o.stderr).into_owned();
    let reranked: f64 = summary.lines().find_map(|l| l.strip_prefix("BLEU reranked\t")).unwrap().parse().unwrap();
    fs::write(d.join("sel"), &selections).unwrap();
    let o = sptm(&["eval", "--hyp", "sel", "--ref", "test.ref"], d);
    let evaluated: f64 = stdout(&o).trim().parse().unwrap();
    assert!((evaluated - reranked).abs() < 1e-4);

    let o = sptm(&["export-embeddings", "--model", "m"], d);
    let text = stdout(&o);
    let first = text.lines().next().unwrap();
    let (word, values) = first.split_once('\t').unwrap();
    assert!(!word.is_empty());
    assert_eq!(values.split(' ').count(), 16);
    let o = sptm(&["export-embeddings", "--model", "m", "--nbest", "test.nbest", "--refs", "test.ref", "--out", "emb"], d);
    assert!(o.status.success());
    assert!(fs::read_to_string(d.join("emb")).unwrap().lines().any(|l| l.split('\t').next().unwrap().contains(' ')));

    let o = sptm(&["train", "--nbest", "train.nbest", "--refs", "train.ref", "--lambda", "train.lambda", "--out", "m2", "--resume", "ck", "--max-iter", "6"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
