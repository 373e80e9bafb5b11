use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn modalfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modalfuse"))
        .args(args)
        .env_remove("MODALFUSE_FAULT_INJECT")
        .env("MODALFUSE_THREADS", "1")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, task: &str, samples: &str) {
    let out = modalfuse(&["synth", "--task", task, "--samples", samples, "--seed", "2", "--height", "8", "--width", "8", "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data, "crossmodal", "10");
    let out = modalfuse(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "2", "--repeats", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["checkpoint.mfck", "config.toml", "loss_log.csv", "metrics.csv", "summary.json"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    assert_eq!(&fs::read(run.join("checkpoint.mfck")).unwrap()[..4], b"MFCK");
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 2);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn zero_epochs_evaluates_the_initialized_model() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data, "unimodal", "10");
    let out = modalfuse(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "0", "--repeats", "1"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], "0");
    assert!(row[3].parse::<f64>().is_ok());
    assert_eq!(*row.last().unwrap(), "ok");
    assert_eq!(fs::read_to_string(run.join("loss_log.csv")).unwrap(), "run_id,epoch,loss\n");
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data, "crossmodal", "10");
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "[experiment]\nepochs = 1\nrepeats = 1\nlr = 0.01\n[model]\nablate = \"no-cnn\"\n").unwrap();
    let out = modalfuse(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg), "--lr", "0.002", "--k", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.contains("lr = 0.002") && written.contains("epochs = 1"));
    assert!(written.contains("ablate = \"no-cnn\"") && written.contains("grid = 1"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "crossmodal", "6");
    let missing = modalfuse(&["train", "--data", p(&tmp.path().join("absent")), "--out", p(tmp.path())]);
    assert_eq!(missing.status.code(), Some(2));
    let bad_k = modalfuse(&["train", "--data", p(&data), "--out", p(&tmp.path().join("x")), "--k", "3"]);
    assert_eq!(bad_k.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_k.stderr).contains("axis H"));
    assert!(!tmp.path().join("x").exists());
    let zero = modalfuse(&["train", "--data", p(&data), "--out", p(tmp.path()), "--repeats", "0"]);
    assert_eq!(zero.status.code(), Some(1));
    let conflict = modalfuse(&["synth", "--task", "unimodal", "--mask", "first", "--out", p(tmp.path())]);
    assert_eq!(conflict.status.code(), Some(1));
    let no_run = modalfuse(&["eval", "--data", p(&data), "--run", p(&tmp.path().join("nothing"))]);
    assert_eq!(no_run.status.code(), Some(2));
    let corrupt = tmp.path().join("corrupt");
    fs::create_dir(&corrupt).unwrap();
    fs::write(corrupt.join("manifest.txt"), "garbage line\n").unwrap();
    let unreadable = modalfuse(&["train", "--data", p(&corrupt), "--out", p(tmp.path())]);
    assert_eq!(unreadable.status.code(), Some(2));
}

#[test]
fn ablation_marks_invalid_cells_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("grid"));
    synth(&data, "crossmodal", "10");
    let run = modalfuse(&["ablate", "--data", p(&data), "--out", p(&out), "--k", "3,2", "--ablate", "no-cnn", "--epochs", "1", "--repeats", "2"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.lines().nth(2).unwrap().contains("invalid"));
    assert!(stdout.lines().nth(3).unwrap().contains(" ± "));
    assert!(out.join("ablation.csv").is_file() && out.join("ablation.txt").is_file());
}

#[test]
fn params_lists_every_variant() {
    let out = modalfuse(&["params", "--variant", "small", "--k", "4"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for label in ["full", "w/o transformer", "w/o CNN"] {
        assert!(text.lines().any(|l| l.starts_with(label)), "{label}");
    }
}

#[test]
fn synth_output_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "crossmodal", "5");
    synth(&b, "crossmodal", "5");
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}
