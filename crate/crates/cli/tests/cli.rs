use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
k_source = 3
k_target = 3
n_source = 60
n_target = 60
latent_dim = 10
shared_dims = 6
nuisance_dims = 2
hidden_dim = 16
feature_dim = 8
batch_size = 20
pretrain_epochs = 2
finetune_epochs = 2
kmeans_restarts = 2
alpha = 0.9
";

fn crossclust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossclust"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = crossclust(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    ok(&["generate-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(data.join("dataset.txt").exists());
    assert!(data.join("target_truth.txt").exists());

    ok(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert!(run.join("pretrained.ckpt").exists());

    let stdout = ok(&[
        "finetune", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--ablation", "full", "--balance",
        "on",
    ]);
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, serde_json::from_str::<Value>(&stdout).unwrap());
    assert_eq!(metrics["ablation"], "full");
    assert_eq!(metrics["branches"].as_array().unwrap().len(), 2);
    for b in metrics["branches"].as_array().unwrap() {
        let acc = b["acc"].as_f64().unwrap();
        assert!((1.0 / 3.0 - 1e-9..=1.0).contains(&acc));
    }

    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "stage,epoch,branch,acc,nmi,ari,uniformity,sup,dec,cont,ocm,ccm,total"
    );
    assert_eq!(lines.count(), 4);
    assert!(run.join("finetuned.ckpt").exists());

    let mut dumps: Vec<_> = std::fs::read_dir(run.join("labels"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    dumps.sort();
    assert_eq!(dumps.len(), 2);
    let eval = ok(&[
        "evaluate",
        "--labels",
        s(&dumps[1]),
        "--truth",
        s(&data.join("target_truth.txt")),
        "--branch",
        "1",
        "--k",
        "3",
    ]);
    let rec: Value = serde_json::from_str(&eval).unwrap();
    for key in ["acc", "nmi", "ari", "uniformity"] {
        assert!(rec[key].is_number(), "{key} missing from {eval}");
    }
    // balanced labels of 60 samples over 3 clusters are exactly 20 each
    assert!((rec["uniformity"].as_f64().unwrap() - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn sinkhorn_demo_balances() {
    let out: Value = serde_json::from_str(&ok(&["sinkhorn-demo", "--k", "4", "--n", "40", "--seed", "3"])).unwrap();
    assert_eq!(out["converged"], true);
    assert_eq!(out["cluster_sizes"], serde_json::json!([10, 10, 10, 10]));
    assert!(out["row_marginal_err"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn sinkhorn_demo_rejects_more_clusters_than_samples() {
    let out = crossclust(&["sinkhorn-demo", "--k", "5", "--n", "4"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("more clusters than samples"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "k_target = 4\nlearning_rate = 0.1\n").unwrap();
    let out = crossclust(&["generate-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn evaluate_rejects_a_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("d.txt");
    let truth = dir.path().join("t.txt");
    std::fs::write(&dump, "# index branch0 branch1\n0 0 1\n1 1 0\n").unwrap();
    std::fs::write(&truth, "0\n1\n").unwrap();
    let out = crossclust(&["evaluate", "--labels", s(&dump), "--truth", s(&truth), "--branch", "2"]);
    assert!(!out.status.success());
    let good = ok(&["evaluate", "--labels", s(&dump), "--truth", s(&truth)]);
    let rec: Value = serde_json::from_str(&good).unwrap();
    assert_eq!(rec["acc"], 1.0);
}
