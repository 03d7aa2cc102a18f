use std::path::Path;
use std::process::{Command, Output};

fn fbi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbi")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fbi(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const TINY: &str = r#"{
  "fusion": "mlp",
  "env": { "n_points": 32, "material_points": 64, "goal_points": 8 },
  "policy": { "hidden": 8, "d_s": 8, "d_v": 8, "d_tac": 8, "token_width": 4, "time_dim": 8, "widths": [16], "mid": 16 },
  "train": { "epochs": 1, "batch": 16, "chunk": 8 },
  "eval": { "episodes": 2, "chunk": 2 }
}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = d.join("data");
    ok(&["gen-data", "--task", "push", "--n", "3", "--seed", "1", "--out", s(&data), "--config", s(&cfg)]);
    let mut files: Vec<String> =
        std::fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["manifest.json", "traj_00000.bin", "traj_00001.bin", "traj_00002.bin"]);

    let ckpt = d.join("policy.ckpt");
    let losses = d.join("loss.csv");
    ok(&["train-policy", "--data", s(&data), "--out", s(&ckpt), "--config", s(&cfg), "--loss-csv", s(&losses)]);
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(&losses).unwrap().lines().count(), 2);

    let summary = d.join("summary.json");
    let evals = d.join("one_step.csv");
    ok(&[
        "eval", "--policy", s(&ckpt), "--task", "push", "--steps", "1", "--timing", "--out", s(&summary), "--csv",
        s(&evals), "--config", s(&cfg),
    ]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(v["nfe"].as_f64(), Some(1.0));
    assert_eq!(v["n_steps"].as_u64(), Some(1));
    assert_eq!(v["episodes"].as_u64(), Some(2));
    assert!(v["latency_ms"].as_f64().unwrap() > 0.0);
    let rows = std::fs::read_to_string(&evals).unwrap();
    assert!(rows.starts_with("seed,checkpoint_epoch,success_rate\n0,1,"), "{rows}");

    let report = d.join("report");
    ok(&["report", "--inputs", s(&evals), "--summaries", s(&summary), "--out", s(&report)]);
    let table = std::fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(table.starts_with("variant,seeds,mean,std,best_epoch_mean\none_step,1,"), "{table}");
    assert!(std::fs::read_to_string(report.join("success.svg")).unwrap().starts_with("<svg"));
    assert!(report.join("latency.svg").exists());
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(!out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(fbi(&[]).status.code(), Some(2));
    assert_eq!(fbi(&["gen-data", "--task", "juggle", "--n", "1", "--out", "x"]).status.code(), Some(2));
    assert_eq!(fbi(&["eval", "--task", "push"]).status.code(), Some(2));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = fbi(&["gen-data", "--task", "push", "--n", "1", "--out", s(&dir.path().join("d")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let out = fbi(&["eval", "--policy", s(&dir.path().join("missing.ckpt")), "--task", "push"]);
    assert_eq!(out.status.code(), Some(1));
}
