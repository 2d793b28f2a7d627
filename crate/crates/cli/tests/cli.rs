use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ibit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

const TINY_CONFIG: &str = r#"{
    "layers": 1, "heads": 2, "d_model": 8, "patch_size": 7, "image_size": 28,
    "num_classes": 4, "mlp_ratio": 2, "epochs": 2, "batch_size": 8,
    "filter_size": 2, "mask_pretrain_epochs": 50
}"#;

fn tiny_setup(root: &Path) -> (String, String) {
    let data = root.join("data");
    let o = ibit(&["--seed", "3", "export-synth", "--n", "40", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    (data.to_string_lossy().into_owned(), cfg.to_string_lossy().into_owned())
}

#[test]
fn verify_equivalence_passes_and_reports_exact_identity_filters() {
    let o = ibit(&["verify-equivalence", "--max-grid", "7", "--trials", "30"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let f1: Vec<&str> = out.lines().filter(|l| l.contains(" f=1 ") && l.starts_with("equivalence")).collect();
    assert!(!f1.is_empty());
    assert!(f1.iter().all(|l| l.contains("max_error=0e0")), "{f1:?}");
    assert!(out.contains("rank grid=7x7 f=3 rolled_rank="));
    assert!(out.contains("failures=0"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(ibit(&["--precision", "f32", "verify-equivalence"]).status.code(), Some(2));
    assert_eq!(ibit(&["verify-equivalence", "--bogus"]).status.code(), Some(2));
    assert_eq!(ibit(&["verify-equivalence", "--max-grid", "1"]).status.code(), Some(2));
    assert_eq!(ibit(&["train", "--variant", "convit", "--data", "x", "--out", "y"]).status.code(), Some(2));
}

#[test]
fn missing_data_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = ibit(&["eval", "--ckpt", dir.path().join("none.ibck").to_str().unwrap(), "--data", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(ibit(&["export-synth", "--n", "24", "--out", d.path().to_str().unwrap()]).status.success());
    }
    let ma = manifest(a.path());
    assert_eq!(ma, manifest(b.path()));
    assert_eq!(ma["files"].as_array().unwrap().len(), 4);
}

#[test]
fn train_eval_explain_masks_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_setup(root.path());
    let run = |name: &str, log: &str| {
        let out = root.path().join(name);
        let o = ibit(&["--log", log, "train", "--config", &cfg, "--data", &data, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (out, o)
    };
    let (run_a, o) = run("a", "json");
    let (run_b, _) = run("b", "text");
    assert_eq!(manifest(&run_a), manifest(&run_b));

    let lines: Vec<Value> = String::from_utf8_lossy(&o.stderr)
        .lines()
        .map(|l| serde_json::from_str(l).expect("json log line"))
        .collect();
    assert_eq!(lines[0]["event"], "config");
    assert_eq!(lines[0]["config"]["train_config"]["layers"], 1);
    let step = lines.iter().find(|l| l["event"] == "step").unwrap();
    for key in ["step", "loss", "lr", "epoch", "wallclock"] {
        assert!(step.get(key).is_some(), "missing {key}");
    }
    let ckpts = fs::read_dir(run_a.join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 3);

    let model = run_a.join("model.ibck");
    let model = model.to_str().unwrap();
    let e = ibit(&["eval", "--ckpt", model, "--data", &data]);
    assert!(e.status.success());
    let metrics: Value = serde_json::from_slice(&fs::read(run_a.join("metrics.json")).unwrap()).unwrap();
    let test_acc = metrics["history"][1]["test_acc"].as_f64().unwrap();
    assert!(stdout(&e).starts_with(&format!("accuracy={test_acc:.6}")));

    let ex = root.path().join("ex");
    let o = ibit(&["explain", "--ckpt", model, "--data", &data, "--index", "1", "--out", ex.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rollout: Vec<f64> = fs::read_to_string(ex.join("rollout.csv"))
        .unwrap()
        .split([',', '\n'])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(rollout.len(), 16);
    assert!(rollout.iter().all(|&v| v >= 0.0));
    assert!((rollout.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    // The exported input image is a valid PGM the explain command accepts.
    let ex2 = root.path().join("ex2");
    let pgm = ex.join("input.pgm");
    let o = ibit(&["explain", "--ckpt", model, "--image", pgm.to_str().unwrap(), "--out", ex2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let masks = root.path().join("masks");
    let o = ibit(&["masks", "--ckpt-dir", run_a.to_str().unwrap(), "--layer", "0", "--head", "1", "--out", masks.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(manifest(&masks)["files"].as_array().unwrap().len(), 2 * ckpts);
    let bad = ibit(&["masks", "--ckpt-dir", run_a.to_str().unwrap(), "--layer", "5", "--out", masks.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn bench_scaling_writes_csv() {
    let root = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_setup(root.path());
    let csv = root.path().join("out").join("results.csv");
    let o = ibit(&[
        "bench-scaling", "--data", &data, "--config", &cfg, "--fractions", "0.5,1.0", "--seeds", "0,1", "--epochs", "1",
        "--out", csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,fraction,seed,epoch,train_acc,test_acc"));
    // 2 variants x 2 fractions x 2 seeds x 1 epoch.
    assert_eq!(lines.count(), 8);
    assert!(root.path().join("out").join("manifest.json").exists());
    assert_eq!(stdout(&o).lines().count(), 4);
}
