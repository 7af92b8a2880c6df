use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn trajattn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajattn"))
        .args(args)
        .current_dir(dir)
        .env("TRAJATTN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "seeds = [2]\n[collect]\nsamples = 80\n[training]\nepochs = 1\n[model]\nhidden = 8\n";

#[test]
fn missing_input_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = trajattn(&["collect", "--world", "absent.trajwd", "--out", "o"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent.trajwd"), "{}", stderr(&o));
    let o = trajattn(&["gen-world", "--config", "nope.toml"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.toml"));
}

#[test]
fn config_errors_list_every_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "colour = 1\n[planner]\nsamplez = 3\nelitez = 4\n").unwrap();
    let o = trajattn(&["gen-world", "--config", "bad.toml"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    for key in ["colour", "planner.samplez", "planner.elitez"] {
        assert!(err.contains(key), "{key} not in {err}");
    }
}

#[test]
fn bad_thread_cap_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_trajattn"))
        .args(["gen-world"])
        .current_dir(dir.path())
        .env("TRAJATTN_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("TRAJATTN_THREADS"));
}

#[test]
fn offline_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.toml"), SMALL).unwrap();
    let run = |args: &[&str]| {
        let o = trajattn(args, d);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["gen-world", "--config", "exp.toml", "--out", "w"]);
    run(&["collect", "--config", "exp.toml", "--world", "w/world.trajwd", "--out", "d"]);
    run(&["collect", "--config", "exp.toml", "--world", "w/world_test.trajwd", "--seed", "5", "--out", "d"]);
    for variant in ["trajectory", "self", "none"] {
        run(&["train", "--config", "exp.toml", "--dataset", "d/world.trajds", "--variant", variant, "--out", "m"]);
    }
    let table = run(&[
        "eval-offline", "--config", "exp.toml", "--out", "e",
        "--checkpoint", "m/trajectory_seed2.ckpt", "--checkpoint", "m/none_seed2.ckpt",
        "--dataset", "d/world.trajds", "--dataset", "d/world_test.trajds",
    ]);
    assert!(table.contains("world_test"));
    let csv = fs::read_to_string(d.join("e/eval_offline.csv")).unwrap();
    assert!(csv.starts_with("variant,seed,dataset,split,samples,head,metric,value,config_hash\n"));
    assert_eq!(csv.lines().filter(|l| l.contains(",accuracy,")).count(), 4);
    let out = run(&[
        "export-attention", "--config", "exp.toml", "--checkpoint", "m/self_attention_seed2.ckpt",
        "--dataset", "d/world_test.trajds", "--sample", "3", "--out", "x",
    ]);
    assert!(out.contains("attention_self_attention_sample3_all.ppm"));
    let first = fs::read(d.join("m/none_seed2_metrics.csv")).unwrap();
    run(&["train", "--config", "exp.toml", "--dataset", "d/world.trajds", "--variant", "none", "--out", "m"]);
    assert_eq!(first, fs::read(d.join("m/none_seed2_metrics.csv")).unwrap());
}

#[test]
fn reproduce_toy_prints_variant_by_dataset_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.toml"), format!("{SMALL}[evaluation]\ntest_samples = 40\n")).unwrap();
    let o = trajattn(&["reproduce-toy", "--config", "exp.toml", "--out", "toy"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].contains("train_env_val") && lines[0].contains("test_env"));
    for (line, v) in lines[1..4].iter().zip(["trajectory", "self_attention", "none"]) {
        assert!(line.starts_with(v), "{table}");
    }
    let summary = fs::read_to_string(d.join("toy/toy_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 6);
}
