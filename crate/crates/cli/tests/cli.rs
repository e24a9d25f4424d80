use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn boostdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boostdet")).args(args).env("BOOSTDET_THREADS", "2").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = boostdet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

fn gen(dir: &Path, name: &str, scenes: usize) -> PathBuf {
    let out = dir.join(name);
    ok(&["gen-data", "--out", p(&out), "--scenes", &scenes.to_string(), "--seed", "5"]);
    out
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn log_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr);
    err.lines().last().unwrap_or_default().to_owned()
}

#[test]
fn gen_data_is_reproducible_and_reports_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let summary = stdout_json(&ok(&["gen-data", "--out", p(&a), "--scenes", "100", "--seed", "9"]));
    ok(&["gen-data", "--out", p(&b), "--scenes", "100", "--seed", "9"]);
    assert_eq!((summary["scenes"].as_u64(), summary["train"].as_u64(), summary["val"].as_u64()), (Some(100), Some(80), Some(20)));
    for f in ["dataset.json", "scenes.jsonl"] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = dir.path().join("c");
    ok(&["gen-data", "--out", p(&c), "--scenes", "100", "--seed", "10"]);
    assert_ne!(fs::read(a.join("scenes.jsonl")).unwrap(), fs::read(c.join("scenes.jsonl")).unwrap());
}

#[test]
fn full_mix_makes_every_object_hard() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let s = stdout_json(&ok(&["gen-data", "--out", p(&out), "--scenes", "30", "--mix", "1"]));
    assert!(s["objects"].as_u64().unwrap() > 0);
    assert_eq!(s["objects"], s["hard_objects"]);
}

#[test]
fn unwritable_output_exits_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, "x").unwrap();
    let out = boostdet(&["gen-data", "--out", p(&file.join("sub")), "--scenes", "5"]);
    assert!(!out.status.success());
    assert!(error_line(&out).starts_with("error: io: "), "{}", error_line(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"train": {"epoch": 3}}"#);
    let out = boostdet(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert!(!out.status.success());
    assert!(error_line(&out).starts_with("error: config: "));
}

#[test]
fn training_logs_every_component_each_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 20);
    let cfg = write_config(dir.path(), "c.json", r#"{"train": {"epochs": 2}}"#);
    let run = dir.path().join("r");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let log = log_lines(&run.join("train_log.jsonl"));
    let epochs: Vec<&Value> = log.iter().filter(|l| l["event"] == "epoch").collect();
    assert_eq!(epochs.len(), 2);
    for e in epochs {
        let w = &e["weighted"];
        let sum: f64 = ["obj_rpn", "loc_rpn", "iou_rpn", "reg", "cls"].iter().map(|k| w[k].as_f64().unwrap()).sum();
        assert!((sum - e["total"].as_f64().unwrap()).abs() <= 1e-9 * sum.abs().max(1.0));
    }
    assert_eq!(log.last().unwrap()["event"], "done");
    assert!(run.join("checkpoint/checkpoint.json").exists());
    assert!(run.join("config.json").exists());
}

#[test]
fn omega_zero_logs_unit_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 15);
    let cfg = write_config(dir.path(), "c.json", r#"{"train": {"epochs": 1, "br": {"omega": 0.0}}}"#);
    let run = dir.path().join("r");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let log = log_lines(&run.join("train_log.jsonl"));
    let w = &log[0]["br_weights"];
    assert_eq!((w["min"].as_f64(), w["max"].as_f64(), w["mean"].as_f64()), (Some(1.0), Some(1.0), Some(1.0)));
}

#[test]
fn divergence_aborts_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 40);
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"train": {"epochs": 3, "warmup_steps": 0, "sgd": {"learning_rate": 1e6, "max_grad_norm": null}}}"#,
    );
    let run = dir.path().join("r");
    let out = boostdet(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert!(!out.status.success());
    let line = error_line(&out);
    assert!(line.starts_with("error: training: ") && line.contains("last good checkpoint"), "{line}");
    let log = log_lines(&run.join("train_log.jsonl"));
    assert_eq!(log.last().unwrap()["event"], "abort");
    let ckpt: Value = serde_json::from_slice(&fs::read(run.join("checkpoint/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["state"]["epoch"], log.last().unwrap()["checkpoint_epoch"]);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 15);
    let three = write_config(dir.path(), "three.json", r#"{"train": {"epochs": 3}}"#);
    let one = write_config(dir.path(), "one.json", r#"{"train": {"epochs": 1}}"#);
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    ok(&["train", "--config", p(&three), "--data", p(&data), "--out", p(&full)]);
    ok(&["train", "--config", p(&one), "--data", p(&data), "--out", p(&split)]);
    ok(&["train", "--config", p(&three), "--data", p(&data), "--out", p(&split), "--resume"]);
    assert!(fs::read(full.join("checkpoint/params.bin")).unwrap() == fs::read(split.join("checkpoint/params.bin")).unwrap());
    let epochs = |run: &Path| -> Vec<Value> {
        log_lines(&run.join("train_log.jsonl")).into_iter().filter(|l| l["event"] == "epoch").collect()
    };
    assert_eq!(epochs(&full), epochs(&split));
    assert_eq!(epochs(&full).len(), 3);
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 10);
    let a = write_config(dir.path(), "a.json", r#"{"train": {"epochs": 1}}"#);
    let b = write_config(dir.path(), "b.json", r#"{"train": {"epochs": 2, "fiou": {"eta": 1.0}}}"#);
    let run = dir.path().join("r");
    ok(&["train", "--config", p(&a), "--data", p(&data), "--out", p(&run)]);
    let out = boostdet(&["train", "--config", p(&b), "--data", p(&data), "--out", p(&run), "--resume"]);
    assert!(!out.status.success());
    let line = error_line(&out);
    assert!(line.starts_with("error: config-mismatch: ") && line.contains("train.fiou.eta: 2.0 -> 1.0"), "{line}");
}

fn trained(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = gen(dir, "d", 20);
    let cfg = write_config(dir, "c.json", r#"{"train": {"epochs": 1}}"#);
    let run = dir.join("r");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    (data, cfg, run.join("checkpoint"))
}

#[test]
fn eval_is_repeatable_and_reports_all_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg, ckpt) = trained(dir.path());
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        ok(&["eval", "--config", p(&cfg), "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(e), "--all-modes"]);
    }
    for f in ["metrics.json", "detections.jsonl", "pr_curves.csv"] {
        assert!(fs::read(e1.join(f)).unwrap() == fs::read(e2.join(f)).unwrap(), "{f} differs");
    }
    let m: Value = serde_json::from_slice(&fs::read(e1.join("metrics.json")).unwrap()).unwrap();
    for k in ["ap", "ap50", "ap75"] {
        let v = m[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(m["per_class"].as_array().unwrap().len(), 3);
    let modes: Vec<&str> = m["modes"].as_array().unwrap().iter().map(|x| x["score_mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["cls_only", "prior_only"]);
}

#[test]
fn eval_refuses_a_mismatched_config_with_a_diff() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, ckpt) = trained(dir.path());
    let other = write_config(dir.path(), "o.json", r#"{"model": {"fc_dim": 64}}"#);
    let out = boostdet(&["eval", "--config", p(&other), "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&dir.path().join("e"))]);
    assert!(!out.status.success());
    let line = error_line(&out);
    assert!(line.starts_with("error: config-mismatch: ") && line.contains("model.fc_dim: 128 -> 64"), "{line}");
}

#[test]
fn ablation_ladder_has_four_rows_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 15);
    let cfg = write_config(dir.path(), "c.json", r#"{"train": {"epochs": 1}}"#);
    let out = dir.path().join("ab");
    ok(&["ablate", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--seeds", "2"]);
    let runs = fs::read_to_string(out.join("ablation_runs.csv")).unwrap();
    let rows: Vec<&str> = runs.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 2);
    for label in ["baseline", "+prior", "+fusion", "+br"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("ladder,{label},"))).count(), 2, "{label}");
    }
    let summary = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
}

#[test]
fn grad_check_reports_every_check_and_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["grad-check", "--points", "3", "--out", p(dir.path())]);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["focal", "improved_iou", "fast_iou", "iou_pred", "rcnn_l1", "weighted_ce", "linear", "rcnn_head"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("PASS")), "{name}");
    }
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report.as_array().unwrap().iter().all(|o| o["worst_relative_error"].as_f64().is_some()));

    let out = boostdet(&["grad-check", "--points", "3", "--tolerance", "1e-300"]);
    assert!(!out.status.success());
    assert!(error_line(&out).starts_with("error: check: gradient checks failed"));
}

#[test]
fn plots_are_deterministic_and_pr_curves_span_recall() {
    let dir = tempfile::tempdir().unwrap();
    let pr = write_config(
        dir.path(),
        "pr_curves.csv",
        "class_id,iou_threshold,recall,precision\n0,0.5,0,0\n0,0.5,0.5,0.5\n0,0.5,1,0.667\n1,0.5,0.5,1\n",
    );
    let ab = write_config(
        dir.path(),
        "ablation.csv",
        "table,setting,runs,mean_ap,min_ap,max_ap,mean_ap50,mean_ap75\n\
         ladder,baseline,3,0.2,0.1,0.3,0.4,0.1\nladder,+br,3,0.3,0.25,0.35,0.5,0.2\n\
         eta,eta=0,3,0.2,0.2,0.2,0.4,0.1\neta,eta=2,3,0.25,0.2,0.3,0.45,0.1\n\
         omega,omega=0;normalize=true,3,0.2,0.2,0.2,0.4,0.1\nomega,omega=0.5;normalize=false,3,0.1,0.1,0.1,0.2,0.1\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["plot", "--input", p(&pr), "--input", p(&ab), "--out", p(out)]);
    }
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(
        names,
        ["0_pr_curves.svg", "0_pr_series.csv", "1_ablation_series.csv", "1_eta_sweep.svg", "1_ladder.svg", "1_omega_sweep.svg"]
    );
    for n in &names {
        assert!(fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap(), "{n} differs");
    }
    let series = fs::read_to_string(a.join("0_pr_series.csv")).unwrap();
    let class0: Vec<&str> = series.lines().filter(|l| l.starts_with("0,")).collect();
    assert_eq!(class0.first(), Some(&"0,0,0.667"));
    assert_eq!(class0.last(), Some(&"0,1,0.667"));
    let class1: Vec<&str> = series.lines().filter(|l| l.starts_with("1,")).collect();
    assert_eq!(class1, ["1,0,1", "1,0.5,1"]);
}

#[test]
fn empty_plot_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let header_only = write_config(dir.path(), "pr.csv", "class_id,iou_threshold,recall,precision\n");
    let blank = write_config(dir.path(), "blank.csv", "");
    for input in [&header_only, &blank] {
        let out = boostdet(&["plot", "--input", p(input), "--out", p(&dir.path().join("o"))]);
        assert!(!out.status.success());
        assert!(error_line(&out).starts_with("error: empty-plot: "), "{}", error_line(&out));
    }
}
