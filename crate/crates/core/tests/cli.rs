use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{"seed": 3, "dataset": {"n_subjects": 10, "height": 16, "width": 16},
 "train": {"epochs": 2}, "student": {"epochs": 2}, "kd": {"train": {"epochs": 2}},
 "prune": {"iterations": 2, "fine_tune_epochs": 1}, "bench": {"reps": 3, "warmup": 1},
 "arch": {"students": ["student_plain"]}}"#;

fn shrinknet(config: &Path, ws: &Path, extra: &[&str], cmd: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shrinknet"))
        .arg("--quiet")
        .arg("--config")
        .arg(config)
        .arg("--workspace")
        .arg(ws)
        .args(extra)
        .arg(cmd)
        .env_remove("SHRINKNET_SEED")
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let ws = dir.path().join("ws");
    for cmd in ["datagen", "train", "prune", "distill", "eval", "bench", "report"] {
        let out = shrinknet(&config, &ws, &[], cmd);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in [
        "teacher.nnzm",
        "pruned_layerwise_magnitude_cr8.nnzm",
        "prune_history_layerwise_magnitude_cr8.json",
        "student_plain_kd.nnzm",
        "student_plain_plain.nnzm",
        "scores_teacher.csv",
        "verification_teacher.json",
        "bench_teacher.json",
        "bench_comparison.csv",
        "report.json",
    ] {
        assert!(ws.join(f).is_file(), "missing {f}");
    }
    let report = json(&ws.join("report.json"));
    let models = report["models"].as_object().unwrap();
    assert!(models.len() >= 4);
    for (name, entry) in models {
        for key in ["eer", "gmr_at", "auc", "cr_params", "total_madds", "mean_et_ms"] {
            assert!(entry.get(key).is_some(), "{name} lacks {key}");
        }
    }
    let manifest = json(&ws.join("manifest.json"));
    for cmd in ["datagen", "train", "prune", "distill", "eval", "bench", "report"] {
        let entry = &manifest[cmd];
        assert!(entry["config_hash"].is_string(), "{cmd}");
        assert!(!entry["outputs"].as_object().unwrap().is_empty(), "{cmd}");
    }
    let csv = std::fs::read_to_string(ws.join("scores_teacher.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let ws = dir.path().join("ws");
    // Training before datagen has no dataset to read.
    assert_eq!(shrinknet(&config, &ws, &[], "train").status.code(), Some(3));
    let bad = shrinknet(&config, &ws, &["--set", "prune.rule=cubic"], "datagen");
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("prune.rule"));
    assert_eq!(shrinknet(&config, &ws, &["--set", "split.train_fraction=1.5"], "datagen").status.code(), Some(2));
    let missing = dir.path().join("nope.json");
    assert_eq!(shrinknet(&missing, &ws, &[], "datagen").status.code(), Some(2));
    std::fs::write(dir.path().join("broken.json"), "{\"seed\": \"x\"}").unwrap();
    assert_eq!(shrinknet(&dir.path().join("broken.json"), &ws, &[], "datagen").status.code(), Some(2));
}

#[test]
fn concurrent_run_is_refused_while_locked() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let ws = dir.path().join("ws");
    std::fs::create_dir_all(&ws).unwrap();
    std::fs::write(ws.join(".shrinknet.lock"), "held").unwrap();
    let out = shrinknet(&config, &ws, &[], "datagen");
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_file(ws.join(".shrinknet.lock")).unwrap();
    assert!(shrinknet(&config, &ws, &[], "datagen").status.success());
    assert!(!ws.join(".shrinknet.lock").exists());
}

#[test]
fn seed_precedence_env_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let hash = |ws: &str, env: Option<&str>, set: &[&str]| {
        let ws = dir.path().join(ws);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_shrinknet"));
        cmd.arg("--quiet").arg("--config").arg(&config).arg("--workspace").arg(&ws).args(set).arg("datagen");
        match env {
            Some(v) => cmd.env("SHRINKNET_SEED", v),
            None => cmd.env_remove("SHRINKNET_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        json(&ws.join("manifest.json"))["datagen"]["config_hash"].as_str().unwrap().to_string()
    };
    let file = hash("a", None, &[]);
    let env = hash("b", Some("9"), &[]);
    let both = hash("c", Some("9"), &["--set", "seed=3"]);
    assert_ne!(file, env);
    assert_eq!(file, both);
}
