use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 3
[data]
n_sequences = 12
[pretrain]
epochs = 1
[search]
n_candidates = 3
batch = 2
[search.cell]
epochs = 2
[finetune]
epochs = 1
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellsearch"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();

    // Nothing exists yet: missing artifacts exit with 3.
    assert_eq!(run(d, &["pretrain-static"]).status.code(), Some(3));

    ok(d, &["gen-data"]);
    assert!(d.join("data/manifest.json").exists());
    ok(d, &["pretrain-static"]);
    assert!(d.join("static.ckpt").exists());
    let out = ok(d, &["search", "--sample", "2"]);
    assert!(out.contains("\"candidates\": 3"));
    let log = std::fs::read_to_string(d.join("search/run.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"record\"")).count(), 3);

    let g = "0,1,4,4,0,2,0,0,3,5";
    ok(d, &["train-cell", g]);
    assert!(d.join("cells/0-1-4-4-0-2-0-0-3-5.ckpt").exists());
    let out = ok(d, &["finetune", g]);
    assert!(out.contains("copy-forward"));
    let out = ok(d, &["eval", d.join("finetuned/0-1-4-4-0-2-0-0-3-5/cell.ckpt").to_str().unwrap()]);
    assert!(out.contains("\"kind\": \"cell\""));
    ok(d, &["report", d.join("search/run.jsonl").to_str().unwrap(), "--window", "2"]);
    for f in ["rewards.csv", "ops.csv", "aggs.csv", "inputs.csv"] {
        assert!(d.join("search/report").join(f).exists(), "{f}");
    }
}

#[test]
fn decode_prints_graph_count_and_dot() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = ok(dir.path(), &["decode", "0,1,0,3,0,5,2,1,5,4"]);
    assert!(out.contains("parameters: "));
    assert!(out.contains("digraph cell {"));
    assert!(out.contains("search space size at K=2: 41990400"));
    assert_eq!(run(dir.path(), &["decode", "0,1,9,3,0"]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), "[search]\nk = 0\n").unwrap();
    assert_eq!(run(dir.path(), &["config"]).status.code(), Some(2));
    std::fs::write(dir.path().join("tiny.toml"), "").unwrap();
    let out = ok(dir.path(), &["config"]);
    assert!(out.contains("n_candidates = 60"));
}
