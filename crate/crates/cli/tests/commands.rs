#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_poselift");

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_tiny(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let (code, _, err) = run(&[
        "gen-data", "--out", p(&out), "--topology", "tiny5", "--sequences", "6", "--frames", "5", "--seed", seed,
    ]);
    assert_eq!(code, 0, "{err}");
    out
}

const TINY_RUN: &str = r#"{
  "model": {"topology": "tiny5", "input_frames": 5, "hidden_dim": 4, "max_order": 2, "root_relative": false},
  "train": {"epochs": 2, "batch_size": 4, "augment": false}
}"#;

fn train_tiny(dir: &Path, data: &Path) -> std::path::PathBuf {
    let config = dir.join("run.json");
    std::fs::write(&config, TINY_RUN).unwrap();
    let ckpt = dir.join("m.ckpt");
    let csv = dir.join("curve.csv");
    let (code, out, err) = run(&[
        "train", "--config", p(&config), "--data", p(data), "--out-checkpoint", p(&ckpt), "--curve-csv", p(&csv),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("best eval MPJPE"), "{out}");
    let csv = std::fs::read_to_string(&csv).unwrap();
    assert!(csv.starts_with("epoch,lr,train_loss,eval_mpjpe,eval_pmpjpe\n"), "{csv}");
    assert_eq!(csv.lines().count(), 3);
    ckpt
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(gen_tiny(dir.path(), "a.jsonl", "4")).unwrap();
    let b = std::fs::read(gen_tiny(dir.path(), "b.jsonl", "4")).unwrap();
    let c = std::fs::read(gen_tiny(dir.path(), "c.jsonl", "5")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 6);
}

#[test]
fn evaluating_own_predictions_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path(), "d.jsonl", "0");
    let ckpt = train_tiny(dir.path(), &data);

    let poses = dir.path().join("poses.json");
    let (code, _, err) = run(&["predict", "--checkpoint", p(&ckpt), "--data", p(&data), "--out-poses", p(&poses)]);
    assert_eq!(code, 0, "{err}");
    let preds: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(&poses).unwrap()).unwrap();
    assert_eq!(preds.len(), 6);

    // Replace every ground truth by the model's own prediction.
    let text = std::fs::read_to_string(&data).unwrap();
    let mut lines = Vec::new();
    for (line, pred) in text.lines().zip(&preds) {
        let mut rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["id"], pred["id"]);
        rec["frames_3d"] = pred["pose"].clone();
        lines.push(serde_json::to_string(&rec).unwrap());
    }
    let own = dir.path().join("own.jsonl");
    std::fs::write(&own, lines.join("\n") + "\n").unwrap();

    let report = dir.path().join("report.json");
    let (code, out, err) = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&own), "--report-json", p(&report)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("MPJPE 0 P-MPJPE"), "{out}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(report["mpjpe"].as_f64().unwrap(), 0.0);
    assert!(report["p_mpjpe"].as_f64().unwrap() < 1e-9, "{report}");
    assert_eq!(report["num_sequences"], 6);
}

#[test]
fn dump_attention_writes_every_map() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path(), "d.jsonl", "1");
    let ckpt = train_tiny(dir.path(), &data);
    let out = dir.path().join("att.json");
    let (code, _, err) = run(&[
        "dump-attention", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out), "--limit", "2",
    ]);
    assert_eq!(code, 0, "{err}");
    let dumps: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(dumps.len(), 2);
    let block = &dumps[0]["blocks"][0];
    for key in ["jtt", "jwa_logits", "p_scl", "bcma"] {
        assert!(!block[key].is_null(), "missing {key}: {block}");
    }
    assert!(dumps[0]["ott"].is_array());
}

#[test]
fn param_count_matches_layer_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"model":{"topology":"humaneva15","input_frames":27,"drop_rate":2,"bat_blocks":3,"heads":4}}"#)
        .unwrap();
    let (code, out, err) = run(&["param-count", "--config", p(&config), "--json"]);
    assert_eq!(code, 0, "{err}");
    let count: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(count["total"].as_u64().unwrap() as usize, common::analytic_param_count(15, 32, 3, 3, 9));
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    assert_eq!(run(&["no-such-command"]).0, 2);
    assert_eq!(run(&["--threads", "0", "gradcheck"]).0, 2);
    let (code, out, _) = run(&["gradcheck", "--module", "spatial"]);
    assert_eq!(code, 0);
    assert!(out.contains("max relative error"));

    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["eval", "--checkpoint", p(&dir.path().join("missing.ckpt")), "--data", "x.jsonl"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"), "{err}");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model":{"topology":"tiny5","input_frames":5,"hiden_dim":4}}"#).unwrap();
    let (code, _, err) = run(&["param-count", "--config", p(&bad)]);
    assert_eq!(code, 1);
    assert!(err.contains("hiden_dim"), "{err}");
}

#[test]
fn eval_reports_offending_line_for_wrong_skeleton() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path(), "d.jsonl", "2");
    let ckpt = train_tiny(dir.path(), &data);
    let other = dir.path().join("h36m.jsonl");
    let (code, _, err) = run(&["gen-data", "--out", p(&other), "--sequences", "1", "--frames", "5"]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&other)]);
    assert_eq!(code, 1);
    assert!(err.contains("h36m.jsonl:1:") && err.contains("J=5"), "{err}");
}
