use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nav(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nav-cli"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn nav-cli")
}

fn lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("non-JSON stdout line {l:?}: {e}")))
        .collect()
}

fn last_of<'a>(v: &'a [Value], kind: &str) -> &'a Value {
    v.iter().rev().find(|l| l["kind"] == kind).unwrap_or_else(|| panic!("no {kind} line in {v:?}"))
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.navd", "b.navd"] {
        let out = nav(dir.path(), &["gen-data", "--env", "cave", "--records", "200", "--seed", "7", "--out", name]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v = lines(&out);
        assert_eq!(v[0]["kind"], "config");
        assert_eq!(v[0]["settings"]["seed"], 7);
        assert_eq!(last_of(&v, "dataset")["summary"]["records"], 200);
    }
    let a = std::fs::read(dir.path().join("a.navd")).unwrap();
    let b = std::fs::read(dir.path().join("b.navd")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_eval_run_gradcam_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(nav(d, &["gen-data", "--records", "80", "--seed", "2", "--out", "d.navd"]).status.success());

    let stats = lines(&nav(d, &["stats", "--data", "d.navd"]));
    let s = last_of(&stats, "stats");
    assert_eq!(s["records"], 80);
    assert_eq!(s["per_env"].as_object().unwrap().len(), 4);

    let out = nav(d, &["train", "--data", "d.navd", "--epochs", "2", "--points", "64", "--out", "w.navw"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = lines(&out);
    assert_eq!(v.iter().filter(|l| l["kind"] == "epoch").count(), 2);
    let trained = last_of(&v, "rmse").clone();

    let v = lines(&nav(d, &["eval", "--weights", "w.navw", "--data", "d.navd", "--points", "64"]));
    let report = last_of(&v, "rmse");
    assert_eq!(report["arch"], "nmfnet");
    for env in ["normal_city", "collapsed_house", "collapsed_city", "cave"] {
        assert!(report["per_env"][env].as_f64().unwrap() >= 0.0, "{report}");
    }
    // Same split seed as training, so the same test records.
    assert_eq!(report["overall"], trained["overall"]);
    let all = lines(&nav(d, &["eval", "--weights", "w.navw", "--data", "d.navd", "--points", "64", "--all"]));
    assert_eq!(last_of(&all, "rmse")["count"], 80);

    let out = nav(d, &["run", "--weights", "w.navw", "--env", "cave", "--episodes", "2", "--steps", "20", "--points", "64", "--out", "t.jsonl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = lines(&out);
    assert_eq!(v.iter().filter(|l| l["kind"] == "episode").count(), 2);
    assert_eq!(last_of(&v, "summary")["episodes"], 2);
    let trace = std::fs::read_to_string(d.join("t.jsonl")).unwrap();
    let steps: u64 = v.iter().filter(|l| l["kind"] == "episode").map(|l| l["steps"].as_u64().unwrap() + 1).sum();
    assert_eq!(trace.lines().count() as u64, steps);

    let v = lines(&nav(d, &["gradcam", "--weights", "w.navw", "--data", "d.navd", "--index", "5", "--branch", "dmap", "--points", "64"]));
    let cam = last_of(&v, "gradcam");
    assert_eq!(cam["branch"], "dmap");
    let up = cam["upsampled"].as_array().unwrap();
    assert_eq!(up.len() as u64, cam["height"].as_u64().unwrap() * cam["width"].as_u64().unwrap());
    assert!(up.iter().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())));
}

#[test]
fn check_grad_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = nav(dir.path(), &["check-grad"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = lines(&out);
    let summary = last_of(&v, "check_grad");
    assert!(summary["max_rel_error"].as_f64().unwrap() <= 1e-3);
    assert_eq!(summary["passed"], true);
    assert!(summary["cases"].as_u64().unwrap() >= 15);
}

#[test]
fn config_file_is_layered_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"records": 30, "env": "cave", "seed": 9, "out": "x.navd"}"#).unwrap();
    let out = nav(dir.path(), &["--config", "c.json", "gen-data", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = &lines(&out)[0]["settings"];
    assert_eq!(cfg["records"], 30);
    assert_eq!(cfg["seed"], 4);
    assert_eq!(cfg["env"], "cave");
    assert!(dir.path().join("x.navd").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| nav(d, args).status.code().unwrap();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--bogus", "1"]), 1);
    assert_eq!(code(&["gen-data", "--env", "moon", "--out", "x.navd"]), 1);
    assert_eq!(code(&["gen-data", "--records", "5"]), 1);
    assert_eq!(code(&["stats", "--data", "missing.navd"]), 1);
    std::fs::write(d.join("c.json"), r#"{"epoch": 3}"#).unwrap();
    assert_eq!(code(&["--config", "c.json", "stats"]), 1);

    std::fs::write(d.join("bad.navd"), b"not a dataset at all, just some bytes").unwrap();
    let out = nav(d, &["stats", "--data", "bad.navd"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert_eq!(code(&["serve", "--env", "mixed"]), 1);
}

#[test]
fn serve_stops_after_max_ticks() {
    let dir = tempfile::tempdir().unwrap();
    let out = nav(dir.path(), &["serve", "--bind", "127.0.0.1:0", "--max-ticks", "3", "--tick-hz", "50"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&out)[0]["settings"]["env"], "normal_city");
}
