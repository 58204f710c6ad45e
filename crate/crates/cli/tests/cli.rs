use std::fs;
use std::process::{Command, Output};

fn ssmax(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmax"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn gradcheck_defaults_pass() {
    let out = ssmax(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.matches(": PASS").count(), 5);
}

#[test]
fn gradcheck_impossible_tolerance_fails() {
    let out = ssmax(&[
        "gradcheck",
        "--rtol",
        "1e-12",
        "--atol",
        "0",
        "--trials",
        "2",
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&ssmax(&["gradcheck", "--classes", "0"])), 2);
    assert_eq!(code(&ssmax(&["bench", "--dtype", "f16"])), 2);
    assert_eq!(code(&ssmax(&["bench", "--kernels", "full,dense"])), 2);
    assert_eq!(code(&ssmax(&["train", "--lr", "-1"])), 2);
    assert_eq!(code(&ssmax(&[])), 2);
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&ssmax(&["--help"])), 0);
}

#[test]
fn bench_writes_jsonl_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("bench.jsonl");
    let svg = dir.path().join("bench.svg");
    let out = ssmax(&[
        "bench",
        "--classes",
        "300",
        "--sampled",
        "10",
        "--embed",
        "16",
        "--batch",
        "8",
        "--iters",
        "2",
        "--warmup",
        "0",
        "--dtype",
        "f64",
        "--kernels",
        "full,sampled",
        "--out",
        jsonl.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let text = fs::read_to_string(&jsonl).unwrap();
    let rows: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        assert_eq!(row["n_classes"], 300);
        assert_eq!(row["dtype"], "f64");
        assert_eq!(row["iters"], 2);
        assert!(row["min_ns"].as_u64().unwrap() <= row["p95_ns"].as_u64().unwrap());
    }
    let svg = fs::read_to_string(&svg).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches("class=\"bar\"").count(), 4);
}

#[test]
fn train_writes_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.jsonl");
    let out = ssmax(&[
        "train",
        "--classes",
        "200",
        "--embed",
        "8",
        "--batch",
        "16",
        "--sampled",
        "8",
        "--steps",
        "101",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let steps: Vec<u64> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, [0, 50, 100]);
}

#[test]
fn divergence_is_a_runtime_error() {
    let out = ssmax(&[
        "train",
        "--classes",
        "50",
        "--embed",
        "4",
        "--steps",
        "20",
        "--lr",
        "1e300",
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8(out.stderr).unwrap().contains("diverged"));
}
