//! End-to-end tests of the `quantkd` binary: exit codes, diagnostics, output
//! artifacts, and override handling.

use std::path::Path;
use std::process::{Command, Output};

fn quantkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quantkd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, patch: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v = serde_json::json!({
        "seed": 3,
        "out_dir": dir.join("run"),
        "model": {
            "arch": { "mlp": { "widths": [2, 12, 12, 3] } },
            "num_classes": 3
        },
        "quant": { "bits": "W2A2", "activation": { "m": 2.0 } },
        "loss": { "mode": "sqakd", "rho": 4.0 },
        "train": {
            "optimizer": { "kind": "sgd", "lr": 0.1, "momentum": 0.9 },
            "epochs": 2,
            "batch_size": 16
        },
        "data": {
            "kind": "blobs",
            "classes": 3,
            "dim": 2,
            "train_per_class": 30,
            "test_per_class": 10,
            "spread": 0.8
        }
    });
    patch(&mut v);
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn qat_without_teacher_exits_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "qat.json", |_| {});
    let out = quantkd(&["qat", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("teacher required"), "{}", stderr_of(&out));
}

#[test]
fn invalid_config_key_exits_nonzero_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", |v| {
        v["no_such_option"] = 1.into();
    });
    let out = quantkd(&["qat", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("no_such_option"), "{}", stderr_of(&out));
}

#[test]
fn pretrain_qat_eval_pipeline_via_binary() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let teacher_cfg = write_config(dir.path(), "teacher.json", |v| {
        v["out_dir"] = serde_json::json!(teacher_dir);
        v["loss"]["mode"] = "ce_only".into();
        v.as_object_mut().unwrap().remove("quant");
        v["train"]["epochs"] = 30.into();
    });
    let out = quantkd(&["pretrain", "--config", &teacher_cfg]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let ckpt = teacher_dir.join("model.sqkd");
    assert!(ckpt.exists());

    let student_cfg = write_config(dir.path(), "student.json", |v| {
        v["teacher_checkpoints"] = serde_json::json!([ckpt]);
        v["train"]["epochs"] = 3.into();
    });
    let out = quantkd(&["qat", "--config", &student_cfg]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let run_dir = dir.path().join("run");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "epoch,train_loss,top1,top5,seconds");
    let last = lines.last().unwrap().to_string();
    let cols: Vec<&str> = last.split(',').collect();
    assert_eq!(cols.len(), 5);

    // Eval reproduces the final recorded accuracy exactly.
    let out = quantkd(&["eval", "--config", &student_cfg]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let top1_line = stdout.lines().find(|l| l.starts_with("top1")).unwrap();
    let top1: f64 = top1_line.split_whitespace().nth(1).unwrap().parse().unwrap();
    let recorded: f64 = cols[2].parse().unwrap();
    assert!((top1 - recorded).abs() < 1e-9, "eval {top1} vs metrics {recorded}");

    // cost.json carries the accounting keys.
    let cost: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("cost.json")).unwrap())
            .unwrap();
    for key in ["N", "T_pre", "T_s", "T_t", "M_t", "M_s", "total"] {
        assert!(cost.get(key).is_some(), "missing {key}");
    }
    assert_eq!(cost["reused_teacher"], serde_json::Value::Bool(true));
}

#[test]
fn identical_invocations_produce_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let teacher_cfg = write_config(dir.path(), "teacher.json", |v| {
        v["out_dir"] = serde_json::json!(teacher_dir);
        v["loss"]["mode"] = "ce_only".into();
        v.as_object_mut().unwrap().remove("quant");
    });
    let out = quantkd(&["pretrain", "--config", &teacher_cfg]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let first = std::fs::read(teacher_dir.join("metrics.csv")).unwrap();
    let out = quantkd(&["pretrain", "--config", &teacher_cfg]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let second = std::fs::read(teacher_dir.join("metrics.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let teacher_cfg = write_config(dir.path(), "teacher.json", |v| {
        v["out_dir"] = serde_json::json!(teacher_dir);
        v["loss"]["mode"] = "ce_only".into();
        v.as_object_mut().unwrap().remove("quant");
    });
    let out = quantkd(&["pretrain", "--config", &teacher_cfg]);
    assert!(out.status.success());
    let baseline = std::fs::read(teacher_dir.join("metrics.csv")).unwrap();

    let out = quantkd(&["pretrain", "--config", &teacher_cfg, "--seed", "99"]);
    assert!(out.status.success());
    let reseeded = std::fs::read(teacher_dir.join("metrics.csv")).unwrap();
    assert_ne!(baseline, reseeded);

    // The resolved config records the effective seed.
    let resolved: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(teacher_dir.join("config.resolved.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(resolved["seed"], serde_json::json!(99));
}

#[test]
fn set_overrides_apply_with_dotted_paths() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let teacher_cfg = write_config(dir.path(), "teacher.json", |v| {
        v["out_dir"] = serde_json::json!(teacher_dir);
        v["loss"]["mode"] = "ce_only".into();
        v.as_object_mut().unwrap().remove("quant");
    });
    let out = quantkd(&[
        "pretrain",
        "--config",
        &teacher_cfg,
        "--set",
        "train.epochs=1",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let metrics = std::fs::read_to_string(teacher_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "{metrics}"); // header + 1 epoch
}

#[test]
fn ablate_expands_rho_axis_into_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let teacher_cfg = write_config(dir.path(), "teacher.json", |v| {
        v["out_dir"] = serde_json::json!(teacher_dir);
        v["loss"]["mode"] = "ce_only".into();
        v.as_object_mut().unwrap().remove("quant");
        v["train"]["epochs"] = 10.into();
    });
    let out = quantkd(&["pretrain", "--config", &teacher_cfg]);
    assert!(out.status.success());

    let ablate_cfg = write_config(dir.path(), "ablate.json", |v| {
        v["teacher_checkpoints"] = serde_json::json!([teacher_dir.join("model.sqkd")]);
        v["train"]["epochs"] = 1.into();
        v["ablate"] = serde_json::json!({ "rho": [1.0, 4.0, 8.0] });
    });
    let out = quantkd(&["ablate", "--config", &ablate_cfg]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let run_dir = dir.path().join("run");
    let subdirs: Vec<_> = std::fs::read_dir(&run_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(subdirs.len(), 3, "{subdirs:?}");
    for entry in subdirs {
        assert!(entry.path().join("metrics.csv").exists());
    }
}

#[test]
fn every_run_is_restartable_from_its_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let teacher_cfg = write_config(dir.path(), "teacher.json", |v| {
        v["out_dir"] = serde_json::json!(teacher_dir);
        v["loss"]["mode"] = "ce_only".into();
        v.as_object_mut().unwrap().remove("quant");
    });
    let out = quantkd(&["pretrain", "--config", &teacher_cfg]);
    assert!(out.status.success());
    let baseline = std::fs::read(teacher_dir.join("metrics.csv")).unwrap();

    // Re-run directly from the emitted snapshot.
    let resolved = teacher_dir.join("config.resolved.json");
    let out = quantkd(&["pretrain", "--config", resolved.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let rerun = std::fs::read(teacher_dir.join("metrics.csv")).unwrap();
    assert_eq!(baseline, rerun);
}
