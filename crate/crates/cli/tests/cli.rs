use std::path::Path;
use std::process::{Command, Output};

fn ust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ust"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run ust")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn version_reports_checkpoint_format() {
    let o = ust(&["--version"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("checkpoint format version 1"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(ust(&[]).status.code(), Some(2));
    assert_eq!(ust(&["train", "--bogus"]).status.code(), Some(2));
    let o = ust(&[
        "translate",
        "--direction",
        "try-on",
        "--input",
        "a.png",
        "--mask",
        "m.png",
        "--checkpoint",
        "c.ust",
        "--out",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--context"));
    let o = ust(&["synth-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: usage:"));
}

#[test]
fn operational_failures_exit_with_one_and_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = ust(&[
        "translate",
        "--direction",
        "take-off",
        "--input",
        p(&dir.path().join("missing.png")),
        "--mask",
        p(&dir.path().join("missing_mask.png")),
        "--checkpoint",
        p(&dir.path().join("missing.ust")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: missing_file:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn bad_config_key_is_an_operational_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "trainer.not_a_key = 1\n").unwrap();
    let o = ust(&["--config", p(&cfg), "synth-data", "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: config:"));
    assert!(!dir.path().join("d").exists());
}

fn mean_column(csv: &str, col: usize) -> f64 {
    let rows: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "# tiny run\ntrainer.log_every = 2\ntrainer.checkpoint_every = 2\n").unwrap();

    let o = ust(&["--seed", "3", "synth-data", "--n-items", "6", "--views", "2", "--test-fraction", "0.34", "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("manifest.txt").is_file());

    let o = ust(&["--config", p(&cfg), "--seed", "3", "--data-root", p(&data), "--out", p(&run), "train", "--steps", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = run.join("model.ust");
    for f in ["ckpt_000002.ust", "ckpt_000003.ust", "losses.csv", "grids/step_000002.png"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let o = ust(&[
        "--data-root",
        p(&data),
        "--out",
        p(&run.join("resumed")),
        "train",
        "--steps",
        "4",
        "--resume",
        p(&run.join("ckpt_000003.ust")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("resumed/ckpt_000004.ust").is_file());

    let tx = dir.path().join("tx");
    let o = ust(&[
        "translate",
        "--direction",
        "take-off",
        "--input",
        p(&data.join("domainA/item0000_v0.png")),
        "--mask",
        p(&data.join("domainA_masks/item0000_v0.png")),
        "--checkpoint",
        p(&model),
        "--out",
        p(&tx),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tx.join("take_off.png").is_file());
    let o = ust(&[
        "translate",
        "--direction",
        "try-on",
        "--input",
        p(&data.join("domainB/item0001.png")),
        "--mask",
        p(&data.join("domainA_masks/item0000_v0.png")),
        "--context",
        p(&data.join("domainA/item0000_v0.png")),
        "--style-from",
        p(&data.join("domainB/item0002.png")),
        "--checkpoint",
        p(&model),
        "--out",
        p(&tx),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tx.join("try_on.png").is_file());

    let ev = dir.path().join("eval");
    let o = ust(&["--data-root", p(&data), "--out", p(&ev), "evaluate", "--checkpoint", p(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    let scores = std::fs::read_to_string(ev.join("scores.csv")).unwrap();
    let take_off = report["take_off_ssim"].as_f64().unwrap();
    assert!((take_off - 100.0 * mean_column(&scores, 1)).abs() < 1e-6);
    let try_on = report["try_on_perceptual"].as_f64().unwrap();
    assert!((try_on - 100.0 * mean_column(&scores, 4)).abs() < 1e-6);

    let rt = dir.path().join("retrieve");
    let o = ust(&["--data-root", p(&data), "--out", p(&rt), "retrieve", "--checkpoint", p(&model), "--ks", "1,5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recall: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rt.join("recall.json")).unwrap()).unwrap();
    assert_eq!(recall["database"].as_u64(), Some(6));
    assert_eq!(recall["cost"].as_u64(), Some(8 * 6 * recall["queries"].as_u64().unwrap()));
    assert!(rt.join("index.ust").is_file());

    let rr = dir.path().join("rerank");
    let o = ust(&["--data-root", p(&data), "--out", p(&rr), "rerank", "--checkpoint", p(&model), "--ks", "1,5", "--k", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reranked: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rr.join("recall.json")).unwrap()).unwrap();
    assert_eq!(reranked["rerank_k"].as_u64(), Some(3));
    assert_eq!(reranked["recall"][1], recall["recall"][1]);
}
