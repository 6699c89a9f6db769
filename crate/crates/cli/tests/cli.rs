use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn defectgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defectgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn defectgan")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn toy(dir: &Path) {
    let out = defectgan(&[
        "make-toy-data",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "3",
        "--samples_per_class",
        "6",
        "--image_size",
        "16",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&defectgan(&["--help"])), 0);
    assert_eq!(code(&defectgan(&[])), 1);
    assert_eq!(code(&defectgan(&["train", "--seed", "many"])), 1);
    assert_eq!(code(&defectgan(&["frobnicate"])), 1);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = defectgan(&["make-toy-data", "--out", dir.path().to_str().unwrap(), "--no_such_key", "1"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no_such_key"), "{}", stderr(&out));
}

#[test]
fn invalid_critic_ratio_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    toy(&dir.path().join("toy"));
    let out = defectgan(&[
        "train",
        "--preset",
        "micro",
        "--data",
        dir.path().join("toy").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--n_critic",
        "0",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("n_critic"), "{}", stderr(&out));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = defectgan(&["make-toy-data", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn run_manifest_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    toy(&a);
    toy(&b);
    let strip = |mut v: Value| {
        let obj = v.as_object_mut().unwrap();
        assert!(obj.remove("created_at").is_some());
        obj.remove("artifacts");
        v
    };
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["command"], "make-toy-data");
    assert_eq!(ma["seed"], 3);
    assert_eq!(strip(ma), strip(mb));
    assert_eq!(fs::read(a.join("index.csv")).unwrap(), fs::read(b.join("index.csv")).unwrap());
}

#[test]
fn train_then_generate_with_a_box() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    toy(&data);
    let run = dir.path().join("run");
    let config = dir.path().join("train.json");
    fs::write(&config, r#"{"iterations": 5, "lr_start": 0.0001}"#).unwrap();
    let out = defectgan(&[
        "train",
        "--preset",
        "micro",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--iterations",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = manifest(&run);
    // the flag wins over the file, the file over the preset
    assert_eq!(m["config"]["iterations"], 3);
    assert_eq!(m["config"]["lr_start"], 0.0001);
    assert_eq!(m["config"]["image_size"], 8);
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);

    let corpus = dir.path().join("corpus");
    let out = defectgan(&[
        "generate",
        "--checkpoint",
        run.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
        "--box",
        "crack:2,2,6,6",
        "--count",
        "3",
        "--with-restorations",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let index = fs::read_to_string(corpus.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 6);
    assert_eq!(manifest(&corpus)["artifacts"]["synthetic"], 3);

    let out = defectgan(&[
        "generate",
        "--checkpoint",
        run.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
        "--box",
        "rust:1,1,2,2",
    ]);
    assert_eq!(code(&out), 1);
}
