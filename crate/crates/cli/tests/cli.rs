use std::path::Path;
use std::process::{Command, Output};

use nsp_bert::corpus::CorpusConfig;
use nsp_bert::data::write_jsonl;
use nsp_bert::harness::{make_synthetic_task, SyntheticConfig, SyntheticKind};
use nsp_bert::Checkpoint;

const CONFIG: &str = r#"{
  "corpus": {"documents": 40},
  "pretrain": {"steps": 20, "batch_size": 4},
  "task": {"pool_documents": 20, "test_documents": 4},
  "k": 2,
  "seeds": [1, 2],
  "tuning": {"epochs": 1, "lr": 1e-3, "batch_size": 4}
}"#;

fn nspbert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nspbert"))
        .current_dir(dir)
        .args(["--config", "run.json", "--checkpoint", "m.ckpt"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), CONFIG).unwrap();
    dir
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = workspace();
    let out = nspbert(dir.path(), &["eval-zeroshot"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m.ckpt"));

    std::fs::write(dir.path().join("run.json"), r#"{"corpus": {"topics": 0}}"#).unwrap();
    assert_eq!(nspbert(dir.path(), &["gen-corpus"]).status.code(), Some(2));
    std::fs::write(dir.path().join("run.json"), "not json").unwrap();
    assert_eq!(nspbert(dir.path(), &["gen-corpus"]).status.code(), Some(2));
}

#[test]
fn gen_corpus_writes_jsonl() {
    let dir = workspace();
    ok(nspbert(
        dir.path(),
        &["--seed", "3", "--out", "c.jsonl", "gen-corpus"],
    ));
    let docs = nsp_bert::corpus::read_jsonl(dir.path().join("c.jsonl")).unwrap();
    assert_eq!(docs.len(), 40);
    let expected = nsp_bert::corpus::generate_corpus(&CorpusConfig {
        documents: 40,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(docs, expected);
}

#[test]
fn end_to_end_pipeline() {
    let dir = workspace();
    let d = dir.path();
    let stdout = ok(nspbert(d, &["--out", "loss.csv", "pretrain"]));
    assert!(stdout.contains("held-out NSP accuracy"));
    assert!(d.join("m.ckpt").exists() && d.join("m.ckpt.vocab").exists());
    let loss = std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21);

    let stdout = ok(nspbert(
        d,
        &["--out", "zs.json", "eval-zeroshot", "--scores", "q.jsonl"],
    ));
    assert!(stdout.starts_with("zero_shot_nsp:"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("zs.json")).unwrap()).unwrap();
    assert_eq!(report["examples"], 4 * 8);
    ok(nspbert(
        d,
        &[
            "--out",
            "h.csv",
            "histogram",
            "--scores",
            "q.jsonl",
            "--bins",
            "4",
        ],
    ));
    let hist = std::fs::read_to_string(d.join("h.csv")).unwrap();
    assert_eq!(hist.lines().count(), 5);

    for mode in ["pet", "samples-contrast", "thresholds"] {
        let kind = if mode == "pet" { "topic" } else { "pair" };
        ok(nspbert(
            d,
            &["eval-zeroshot", "--mode", mode, "--kind", kind],
        ));
    }

    ok(nspbert(
        d,
        &[
            "--out",
            "tune.json",
            "nsp-tune",
            "--variant",
            "decoupled_bce",
        ],
    ));
    ok(nspbert(d, &["--out", "ft.json", "fine-tune"]));
    assert!(d.join("tune.csv").exists() && d.join("tune.epochs.csv").exists());
    let summary = ok(nspbert(d, &["report", "tune.json", "ft.json"]));
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("decoupled_bce,2,"));
    assert!(lines[2].starts_with("fine_tune,2,"));

    let bad = nspbert(d, &["nsp-tune", "--variant", "softmax"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let dir = workspace();
    let d = dir.path();
    ok(nspbert(d, &["pretrain"]));
    let mut ck = Checkpoint::load(d.join("m.ckpt")).unwrap();
    let i = ck.model.param_index("pooler.weight").unwrap();
    ck.model.params_mut()[i].data_mut()[0] = f32::NAN;
    ck.save(d.join("m.ckpt")).unwrap();
    let out = nspbert(d, &["nsp-tune"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed 1"));
}

#[test]
fn task_files_and_sample_mapping() {
    let dir = workspace();
    let d = dir.path();
    ok(nspbert(d, &["pretrain"]));
    let t = make_synthetic_task(
        &CorpusConfig {
            documents: 40,
            ..Default::default()
        },
        &SyntheticConfig {
            kind: SyntheticKind::Pair,
            pool_documents: 10,
            test_documents: 3,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    std::fs::write(d.join("task.json"), t.task.to_json().unwrap()).unwrap();
    write_jsonl(d.join("pool.jsonl"), &t.pool).unwrap();
    write_jsonl(d.join("test.jsonl"), &t.test).unwrap();

    let files = [
        "--task",
        "task.json",
        "--pool",
        "pool.jsonl",
        "--test",
        "test.jsonl",
    ];
    let mut args = vec![
        "eval-zeroshot",
        "--mode",
        "samples-contrast",
        "--scores",
        "q.jsonl",
    ];
    args.extend(files);
    ok(nspbert(d, &args));

    let mapped = ok(nspbert(
        d,
        &["map-samples", "--scores", "q.jsonl", "--task", "task.json"],
    ));
    let labels: Vec<serde_json::Value> = mapped
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(labels.len(), t.test.len());
    let first = t.task.labels()[0];
    let n_first = labels.iter().filter(|v| v["label"] == first).count();
    assert_eq!(2 * n_first, t.test.len());

    let missing = nspbert(d, &["eval-zeroshot", "--task", "task.json"]);
    assert_eq!(missing.status.code(), Some(2));
}
