//! End-to-end tests of the binary: exit codes, determinism, manifest
//! round-trips, and the documented file outputs of every subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tracelab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tracelab")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

/// A training config small enough for tests but exercising both phases.
const TINY_TRAIN: &str = "\
suite.family = modchain
suite.modulus = 2
suite.questions = 2
suite.seed = 3
train.T = 1
train.S_phi = 3
train.S_theta = 3
train.K = 4
train.M = 4
train.n_answers = 4
train.warm_start_steps = 5
train.seed = 11
";

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("missing {name}: {e}"))
}

#[test]
fn gen_suite_is_deterministic_and_fingerprinted() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "suite.cfg", "suite.family = modchain\nsuite.modulus = 3\nsuite.questions = 4\nsuite.seed = 9\n");
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let o = run(&["gen-suite", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read(&out_a, "suite.txt"), read(&out_b, "suite.txt"));
    let manifest = read(&out_a, "manifest.txt");
    assert!(manifest.contains("# suite: sha256:"), "{manifest}");
    assert!(manifest.contains("# emitted: suite.txt"));
    assert!(manifest.contains("suite.seed = 9"));
}

#[test]
fn train_runs_are_byte_identical_and_thread_count_free() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "train.cfg", TINY_TRAIN);
    let outs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(format!("r{i}"))).collect();
    for (out, threads) in outs.iter().zip(["1", "1", "4"]) {
        let o = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics: Vec<String> = outs.iter().map(|o| read(o, "metrics.csv")).collect();
    assert_eq!(metrics[0], metrics[1], "same seed must reproduce bytes");
    assert_eq!(metrics[0], metrics[2], "thread count must not affect output");
    let checkpoints: Vec<String> = outs.iter().map(|o| read(o, "checkpoint.txt")).collect();
    assert_eq!(checkpoints[0], checkpoints[2]);
    assert!(metrics[0].starts_with("round,phase,step,"));
}

#[test]
fn manifest_reruns_reproduce_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "train.cfg", TINY_TRAIN);
    let first = tmp.path().join("first");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", first.to_str().unwrap()]);
    assert!(o.status.success());
    let second = tmp.path().join("second");
    let manifest = first.join("manifest.txt");
    let o = run(&["train", "--config", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&first, "metrics.csv"), read(&second, "metrics.csv"));
    assert_eq!(read(&first, "checkpoint.txt"), read(&second, "checkpoint.txt"));
}

#[test]
fn seed_flag_overrides_config_and_is_echoed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "train.cfg", TINY_TRAIN);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (out, seed) in [(&a, "5"), (&b, "6")] {
        let o = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(o.status.success());
    }
    assert_ne!(read(&a, "metrics.csv"), read(&b, "metrics.csv"));
    assert!(read(&a, "manifest.txt").contains("train.seed = 5"));
    assert!(read(&a, "manifest.txt").contains("suite.seed = 5"));
}

#[test]
fn eval_reads_a_training_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "train.cfg", TINY_TRAIN);
    let train_out = tmp.path().join("train");
    assert!(run(&["train", "--config", cfg.to_str().unwrap(), "--out", train_out.to_str().unwrap()]).status.success());
    let ckpt = train_out.join("checkpoint.txt");
    let eval_cfg = write_config(
        tmp.path(),
        "eval.cfg",
        &format!("{TINY_TRAIN}eval.checkpoint = {}\n", ckpt.display()),
    );
    let eval_out = tmp.path().join("eval");
    let o = run(&["eval", "--config", eval_cfg.to_str().unwrap(), "--out", eval_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&eval_out, "eval.csv");
    assert!(csv.starts_with("question,p,log_p,kl_to_posterior"));
    assert_eq!(csv.lines().count(), 3, "header plus one row per question");
}

#[test]
fn config_errors_exit_2_with_one_line_diagnostics() {
    let tmp = TempDir::new().unwrap();
    // Unknown key.
    let bad = write_config(tmp.path(), "bad.cfg", "train.KK = 8\n");
    let o = run(&["train", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("o1").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("train.KK"), "{err}");

    // Range violation names the key and the legal range.
    let zero = write_config(tmp.path(), "zero.cfg", "train.K = 0\n");
    let o = run(&["train", "--config", zero.to_str().unwrap(), "--out", tmp.path().join("o2").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.K") && err.contains("1..="), "{err}");

    // Missing config file.
    let o = run(&["train", "--config", "/nonexistent.cfg", "--out", tmp.path().join("o3").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    // Unknown subcommand and unknown flag behave like usage errors.
    let o = run(&["frobnicate", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--wat"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bound_sweep_emits_monotone_exact_column() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sweep.cfg", "sweep.k_list = 1,2,3\nsweep.samples = 60\n");
    let out = tmp.path().join("sweep");
    let o = run(&["bound-sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dat = read(&out, "bound_sweep.dat");
    let exacts: Vec<f64> = dat
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(exacts.len(), 3);
    assert!(exacts.windows(2).all(|w| w[1] >= w[0]), "{exacts:?}");
    assert!(read(&out, "manifest.txt").contains("# check exact-bound-monotone-capped: PASS"));
}

#[test]
fn bias_ladder_matches_closed_forms() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ladder");
    let o = run(&["bias-ladder", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dat = read(&out, "bias_ladder.dat");
    let row_08: Vec<f64> = dat
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .find(|row| (row[0] - 0.8).abs() < 1e-12)
        .expect("grid row for p = 0.8");
    assert!((row_08[1] - 0.8).abs() <= 1e-9, "rft weight {}", row_08[1]);
    assert!((row_08[2] - 2.0).abs() <= 1e-9, "grpo weight {}", row_08[2]);
    assert!(read(&out, "manifest.txt").contains("# check weights-track-accuracy: PASS"));
}

#[test]
fn probe_variance_and_compare_objectives_pass_their_predicates() {
    let tmp = TempDir::new().unwrap();
    let probe_cfg = write_config(
        tmp.path(),
        "probe.cfg",
        "probe.members = 2\nprobe.grid = 0.5\nprobe.trials = 20000\n",
    );
    let probe_out = tmp.path().join("probe");
    let o = run(&["probe-variance", "--config", probe_cfg.to_str().unwrap(), "--out", probe_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(&probe_out, "manifest.txt").contains("# check variance-closed-forms: PASS"));
    assert!(read(&probe_out, "variance.dat").starts_with("# members"));

    let web_cfg = write_config(tmp.path(), "web.cfg", "web.fixtures = 5\n");
    let web_out = tmp.path().join("web");
    let o = run(&["compare-objectives", "--config", web_cfg.to_str().unwrap(), "--out", web_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dat = read(&web_out, "equivalences.dat");
    assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert!(dat.lines().skip(1).all(|l| l.ends_with("true")), "{dat}");
}

#[test]
fn oracle_check_runs_the_property_suite() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("oracle");
    let o = run(&["oracle-check", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(&out, "checks.txt");
    assert_eq!(text.lines().count(), 8, "{text}");
    assert!(text.lines().all(|l| l.contains("PASS")), "{text}");
}
