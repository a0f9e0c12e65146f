use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stft(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stft"))
        .env("STFT_OUTPUT_ROOT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &[&str] = &["--train-per-class", "3", "--test-per-class", "2"];

#[test]
fn gen_train_eval_resume() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ok(&stft(r, &[&["gen-data", "--out", "d"], TINY].concat()));
    assert!(r.join("d/manifest.json").exists());

    let common = ["--data", "d", "--batch-size", "16", "--eval-every", "1"];
    ok(&stft(r, &[&["train", "--run", "a", "--epochs", "2"], &common[..]].concat()));
    let log = fs::read_to_string(r.join("a/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let out = ok(&stft(r, &["eval", "--checkpoint", "a/checkpoint.json", "--data", "d"]));
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(report, last["report"]);

    // One epoch, then resume to two: same log as the unbroken run.
    ok(&stft(r, &[&["train", "--run", "b", "--epochs", "1"], &common[..]].concat()));
    let ck: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(r.join("b/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["epoch"], 1);
    ok(&stft(
        r,
        &[&["train", "--run", "b", "--epochs", "2", "--resume", "b/checkpoint.json"], &common[..]].concat(),
    ));
    assert_eq!(fs::read_to_string(r.join("b/metrics.jsonl")).unwrap(), log);
}

#[test]
fn flag_beats_file_beats_preset() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let file = r.join("c.toml");
    fs::write(&file, "gamma = 2.5\nrank = 8\n").unwrap();
    let file = file.to_str().unwrap();
    ok(&stft(
        r,
        &[&["train", "--run", "p", "--epochs", "1", "--config", file, "--rank", "4", "--batch-size", "16"], TINY].concat(),
    ));
    let cfg: toml::Table = fs::read_to_string(r.join("p/config.toml")).unwrap().parse().unwrap();
    assert_eq!(cfg["rank"].as_integer(), Some(4));
    assert_eq!(cfg["gamma"].as_float(), Some(2.5));
    assert_eq!(cfg["lr"].as_float(), Some(1e-4));
}

#[test]
fn invalid_configuration_fails() {
    let root = tempfile::tempdir().unwrap();
    let out = stft(root.path(), &["train", "--rank", "999"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank"));
    let out = stft(root.path(), &["train", "--tsf-mode", "median"]);
    assert!(!out.status.success());
    let out = stft(root.path(), &["ablate", "--axis", "depth"]);
    assert!(!out.status.success());
}

#[test]
fn output_root_comes_from_the_environment() {
    let root = tempfile::tempdir().unwrap();
    ok(&stft(root.path(), &[&["gen-data"], TINY].concat()));
    assert!(root.path().join("data/text.bin").exists());
}

#[test]
fn ablate_writes_a_table() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let out = ok(&stft(
        r,
        &[&["ablate", "--axis", "tsf", "--run", "t", "--epochs", "1", "--batch-size", "16"], TINY].concat(),
    ));
    assert_eq!(out.lines().count(), 3);
    assert!(r.join("t/rows.json").exists() && r.join("t/0.jsonl").exists() && r.join("t/1.jsonl").exists());
}

#[test]
fn verification_suites_pass() {
    let root = tempfile::tempdir().unwrap();
    let out = ok(&stft(root.path(), &["oracle-check"]));
    assert_eq!(out.lines().count(), 4);
    assert!(out.lines().all(|l| l.starts_with("PASS")));
    let out = ok(&stft(root.path(), &["grad-check", "--seeds", "2"]));
    assert!(out.lines().all(|l| l.starts_with("PASS")));
}
