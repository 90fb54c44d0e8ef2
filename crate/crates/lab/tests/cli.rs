use std::fs;
use std::path::{Path, PathBuf};

use igdm_core::model::Layer;
use igdm_core::{Activation, Architecture, Mlp, ParamSet, Tensor};
use igdm_lab::checkpoint::{load_checkpoint, save_checkpoint};
use igdm_lab::metrics::read_metrics;
use igdm_lab::report::emit_report;
use igdm_lab::{run_command, LabError};
use serde_json::Value;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["igdm"];
    argv.extend_from_slice(args);
    run_command(argv)
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const DATA: &str = r#"{"synthetic": {"kind": "gaussian_mixture", "num_classes": 3, "dim": 4,
                      "samples_per_class": 20, "noise_scale": 0.5, "seed": 11}}"#;

fn teacher_config(out: &str, epochs: usize) -> String {
    format!(
        r#"{{
  "seed": 5,
  "output_dir": "{out}",
  "data": {DATA},
  "model": {{"hidden": [8]}},
  "attack": {{"inner": "pgd_ce", "epsilon": 0.03, "step_size": 0.01, "steps": 3, "random_start": true,
             "eval": {{"epsilon": 0.03, "step_size": 0.01, "steps": 5, "random_start": false}}}},
  "train": {{"epochs": {epochs}, "batch_size": 16, "lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4,
            "lr_drop_factor": 0.1, "diagnostics": {{"max_samples": 8}}}}
}}"#
    )
}

fn distill_config(out: &str, alpha: f64) -> String {
    format!(
        r#"{{
  "seed": 6,
  "output_dir": "{out}",
  "data": {DATA},
  "model": {{"hidden": [6], "teacher_checkpoint": "teacher/model.ckpt"}},
  "attack": {{"inner": "rslad_kl", "epsilon": 0.03, "step_size": 0.01, "steps": 3, "random_start": true,
             "eval": {{"epsilon": 0.03, "step_size": 0.01, "steps": 5, "random_start": false}}}},
  "loss": {{"ad_kind": "ard", "igdm_alpha": {alpha}}},
  "train": {{"epochs": 3, "batch_size": 16, "lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4,
            "lr_drop_factor": 0.1}}
}}"#
    )
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["distill"]), 1);
    assert_eq!(run(&["report", "--out", "x"]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["--help"]), 0);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(run(&["train-teacher", "--config", missing.to_str().unwrap()]), 1);
    let typo = config(dir.path(), "typo.json", &teacher_config("out", 1).replace("\"momentum\"", "\"momentun\""));
    assert_eq!(run(&["train-teacher", "--config", typo.to_str().unwrap()]), 1);
    let bad_batch = config(dir.path(), "batch.json", &teacher_config("out", 1).replace("\"batch_size\": 16", "\"batch_size\": 0"));
    assert_eq!(run(&["train-teacher", "--config", bad_batch.to_str().unwrap()]), 1);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "d.json", &distill_config("student", 1.0));
    assert_eq!(run(&["distill", "--config", cfg.to_str().unwrap()]), 2);

    fs::create_dir_all(dir.path().join("teacher")).unwrap();
    fs::write(dir.path().join("teacher/model.ckpt"), b"XXXXXXXX\x01").unwrap();
    assert_eq!(run(&["distill", "--config", cfg.to_str().unwrap()]), 2);
}

#[test]
fn train_distill_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let t = config(dir.path(), "teacher.json", &teacher_config("teacher", 4));
    assert_eq!(run(&["train-teacher", "--config", t.to_str().unwrap()]), 0);
    let tdir = dir.path().join("teacher");
    for f in ["config.json", "metrics.csv", "model.ckpt", "report.json"] {
        assert!(tdir.join(f).is_file(), "{f} missing");
    }
    let records = read_metrics(&tdir.join("metrics.csv")).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.remainder.is_some() && r.gd.is_none()));
    let report = read_json(&tdir.join("report.json"));
    assert_eq!(report["epochs"], 4);
    assert_eq!(report["teacher_forward_passes"], 0);

    let s = config(dir.path(), "student.json", &distill_config("student", 0.0));
    assert_eq!(run(&["distill", "--config", s.to_str().unwrap()]), 0);
    let sdir = dir.path().join("student");
    let csv = fs::read_to_string(sdir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "loss_igdm").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert_eq!(row.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0);
    }
    let report = read_json(&sdir.join("report.json"));
    assert!(report["teacher_forward_passes"].as_u64().unwrap() > 0);
    assert!(report["alignment"]["gd"].as_f64().unwrap() > 0.0);

    let e = config(
        dir.path(),
        "eval.json",
        &teacher_config("eval", 1).replace("\"hidden\": [8]", "\"hidden\": [8], \"checkpoint\": \"teacher/model.ckpt\""),
    );
    assert_eq!(run(&["attack-eval", "--config", e.to_str().unwrap()]), 0);
    let r = read_json(&dir.path().join("eval/report.json"));
    let clean = r["clean_acc"].as_f64().unwrap();
    assert_eq!(r["samples"], 60);
    assert!(r["pgd_acc"].as_f64().unwrap() <= clean);
    assert!(r["fgsm_acc"].as_f64().unwrap() <= clean);

    let a = config(
        dir.path(),
        "align.json",
        &distill_config("align", 0.0).replace(
            "\"teacher_checkpoint\"",
            "\"checkpoint\": \"student/model.ckpt\", \"teacher_checkpoint\"",
        ),
    );
    assert_eq!(run(&["align-metrics", "--config", a.to_str().unwrap()]), 0);
    let adir = dir.path().join("align");
    let r = read_json(&adir.join("report.json"));
    assert!(r["gc"].as_f64().unwrap().abs() <= 1.0);
    assert_eq!(fs::read_to_string(adir.join("alignment.csv")).unwrap().lines().count(), 2);

    let out = dir.path().join("summary");
    let runs = [tdir.to_str().unwrap(), sdir.to_str().unwrap()];
    assert_eq!(run(&["report", "--out", out.to_str().unwrap(), runs[0], runs[1]]), 0);
    let svg: Vec<Vec<u8>> = ["remainder.svg", "gd_gc.svg", "robust_acc.svg"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    let json = fs::read(out.join("report.json")).unwrap();
    assert_eq!(run(&["report", "--out", out.to_str().unwrap(), runs[0], runs[1]]), 0);
    for (f, bytes) in ["remainder.svg", "gd_gc.svg", "robust_acc.svg"].iter().zip(&svg) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), bytes);
        assert!(String::from_utf8_lossy(bytes).starts_with("<svg"));
    }
    assert_eq!(fs::read(out.join("report.json")).unwrap(), json);
}

#[test]
fn snapshot_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.json", &teacher_config("run", 3));
    assert_eq!(run(&["train-teacher", "--config", cfg.to_str().unwrap()]), 0);
    let out = dir.path().join("run");
    let metrics = fs::read(out.join("metrics.csv")).unwrap();
    let ckpt = fs::read(out.join("model.ckpt")).unwrap();

    let snapshot = dir.path().join("snapshot.json");
    fs::copy(out.join("config.json"), &snapshot).unwrap();
    fs::remove_dir_all(&out).unwrap();
    assert_eq!(run(&["train-teacher", "--config", snapshot.to_str().unwrap()]), 0);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), metrics);
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), ckpt);
}

#[test]
fn zero_epochs_write_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.json", &teacher_config("run", 0));
    assert_eq!(run(&["train-teacher", "--config", cfg.to_str().unwrap()]), 0);
    let text = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(load_checkpoint(&dir.path().join("run/model.ckpt")).is_ok());
}

#[test]
fn probe_linearity_of_affine_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture::new(4, vec![], 3, Activation::Relu);
    let weight = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 - 5.5) / 4.0).collect());
    let bias = Tensor::vector(vec![0.5, -1.0, 2.0]);
    let model = Mlp::new(arch, ParamSet { layers: vec![Layer { weight, bias }] }).unwrap();
    save_checkpoint(&model, &dir.path().join("affine.ckpt")).unwrap();
    let body = teacher_config("probe", 1).replace(
        "\"hidden\": [8]",
        "\"hidden\": [], \"checkpoint\": \"affine.ckpt\"",
    );
    let cfg = config(dir.path(), "probe.json", &body);
    assert_eq!(run(&["probe-linearity", "--config", cfg.to_str().unwrap()]), 0);
    let r = read_json(&dir.path().join("probe/report.json"));
    assert_eq!(r["samples"], 60);
    assert!(r["remainder"].as_f64().unwrap() <= 1e-12, "{r}");
}

#[test]
fn report_requires_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty_run");
    fs::create_dir_all(&empty).unwrap();
    match emit_report(&[empty.clone()], &dir.path().join("out")) {
        Err(e @ LabError::Input(_)) => assert!(e.to_string().contains("empty_run"), "{e}"),
        other => panic!("expected input error, got {other:?}"),
    }
    assert_eq!(
        run(&["report", "--out", dir.path().join("out").to_str().unwrap(), empty.to_str().unwrap()]),
        2
    );
}
