use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "preset=tiny\nsamples=2\nbatch=2\nsteps=3\neval_every=2\nseed=5\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shufflemixer")).args(args).output().expect("spawn")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset=tiny\nlearning_rate=1\n");
    let o = run(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn bad_side_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset=desk\nside=36\n");
    assert_eq!(code(&run(&["analyze", "--config", &cfg])), 2);
}

#[test]
fn analyze_writes_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = run(&["analyze", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let kv = fs::read_to_string(out.join("cost.kv")).unwrap();
    assert!(kv.lines().any(|l| l == "audit_mismatches=0"));
    assert!(kv.lines().all(|l| l.contains('=')));
    assert!(out.join("cost.txt").exists());
    let again = dir.path().join("b");
    run(&["analyze", "--out", again.to_str().unwrap()]);
    assert_eq!(kv, fs::read_to_string(again.join("cost.kv")).unwrap());
}

#[test]
fn train_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b, data) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("data"));
    for out in [&a, &b] {
        let o = run(&["train", "--config", &cfg, "--ases", "off", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = fs::read(a.join("train.log")).unwrap();
    assert_eq!(log, fs::read(b.join("train.log")).unwrap());
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
    assert!(a.join("best.ckpt").exists());
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(" loss=")).count(), 3);
    assert!(text.contains("train_dice="));

    let o = run(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(data.join("case_001_label.smvx").exists());
    let eval = |dest: &Path| {
        let o = run(&[
            "eval",
            "--config",
            &cfg,
            "--ases",
            "off",
            "--checkpoint",
            a.join("final.ckpt").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            dest.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dest.join("eval.kv")).unwrap()
    };
    let first = eval(&dir.path().join("e1"));
    let keys = |s: &str| -> Vec<Vec<String>> {
        s.lines()
            .map(|l| l.split(' ').filter_map(|kv| kv.split_once('=').map(|(k, _)| k.to_string())).collect())
            .collect()
    };
    assert!(first.contains("case=1 class=1 dice="));
    assert!(first.contains("aggregate class=1"));
    assert_eq!(first, eval(&dir.path().join("e2")));
    assert_eq!(keys(&first)[0], ["case", "class", "dice", "jaccard", "precision", "recall", "hd95", "doc"]);

    // a checkpoint built with gates does not fit a gate-free model
    let o = run(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        a.join("final.ckpt").to_str().unwrap(),
        "--out",
        dir.path().join("e3").to_str().unwrap(),
    ]);
    assert_ne!(code(&o), 0);
}

#[test]
fn eval_rejects_wrong_volume_shape() {
    let dir = tempfile::tempdir().unwrap();
    let small = write_config(dir.path(), "preset=tiny\nsamples=1\n");
    let data = dir.path().join("data");
    // volumes of side 16 against a desk (side 32) model
    assert_eq!(code(&run(&["synth", "--config", &small, "--out", data.to_str().unwrap()])), 0);
    let o = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        "missing.ckpt",
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corrupted_backward_fails_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--corrupt-backward", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let report = fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(report.contains("status=FAIL"));
    assert!(report.contains("site=softmax"));
}
