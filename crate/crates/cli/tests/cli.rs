use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ddnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddnet")).args(args).output().expect("spawn ddnet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn total(stdout: &[u8]) -> u64 {
    let text = String::from_utf8_lossy(stdout);
    let line = text.lines().find(|l| l.starts_with("total")).expect("total line");
    line.split_whitespace().last().unwrap().parse().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["train", "--help"], &["--version"], &["gradcheck", "--help"]] {
        let out = ddnet(args);
        assert_eq!(code(&out), 0, "{args:?}");
        assert!(!out.stdout.is_empty());
    }
    assert!(String::from_utf8_lossy(&ddnet(&["train", "--help"]).stdout).contains("--decoder-block"));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["params", "--bogus"][..],
        &["frobnicate"],
        &[],
        &["params", "--depth", "4"],
        &["params", "--skips", "x"],
        &["train", "--weights", "cubic", "--data", "d", "--out", "o"],
        &["gradcheck", "--precision", "single"],
        &["params", "--arch", "/no/such/arch.dd"],
    ] {
        assert_eq!(code(&ddnet(args)), 1, "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddnet(&["eval", "--checkpoint", p(&dir.path().join("missing")), "--data", p(dir.path())]);
    assert_eq!(code(&out), 2);
    let out = ddnet(&["train", "--data", p(&dir.path().join("empty")), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn params_grow_with_depth_and_match_the_json() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/presets/tiny.dd");
    let counts: Vec<u64> = ["1", "2", "3"]
        .iter()
        .map(|d| {
            let out = ddnet(&["params", "--arch", p(&arch), "--depth", d, "--out", p(&dir.path().join(d))]);
            assert_eq!(code(&out), 0);
            total(&out.stdout)
        })
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    let json: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("3/params.json")).unwrap()).unwrap();
    assert_eq!(json["total"], counts[2]);
    let parts: u64 = json["modules"].as_array().unwrap().iter().map(|m| m[1].as_u64().unwrap()).sum();
    assert_eq!(parts, counts[2]);
}

#[test]
fn flags_override_the_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = ddnet(&["synth", "--out", p(&data), "--images", "5", "--height", "16", "--width", "16", "--seed", "2"]);
    assert_eq!(code(&synth), 0);
    let config = dir.path().join("run.dd");
    fs::write(&config, "[train]\niterations = 2\nlr = 5e-4\nbatch = 1\neval_interval = 1\n").unwrap();
    let run = dir.path().join("run");
    let out = ddnet(&[
        "train", "--depth", "1", "--data", p(&data), "--out", p(&run), "--config", p(&config), "--iterations", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let cfg = &summary["config"];
    assert_eq!(cfg["iterations"], 1);
    assert_eq!(cfg["lr0"], 5e-4);
    assert_eq!(cfg["batch"], 1);
    assert_eq!(cfg["weight_decay"], 1e-4);
    let records = fs::read_to_string(run.join("reports.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2);
}

#[test]
fn export_graph_writes_dot_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddnet(&["export-graph", "--depth", "2", "--skips", "fb", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0);
    let dot = fs::read_to_string(dir.path().join("graph.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
    let json: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("graph.json")).unwrap()).unwrap();
    let backward = json["edges"].as_array().unwrap().iter().filter(|e| e["kind"] == "backward").count();
    assert_eq!(backward, 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("backward           3"));
}
