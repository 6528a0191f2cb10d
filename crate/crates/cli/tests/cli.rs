use std::path::Path;
use std::process::{Command, Output};

fn attnlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("ATTNLAB_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["gen-data", "--out", name];
    args.extend_from_slice(extra);
    let o = attnlab(&args, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_deterministic_and_seed_env_applies() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "a.json", &[]);
    gen(dir, "b.json", &[]);
    assert_eq!(read(dir, "a.json"), read(dir, "b.json"));

    let o = Command::new(env!("CARGO_BIN_EXE_attnlab"))
        .args(["gen-data", "--out", "c.json"])
        .current_dir(dir)
        .env("ATTNLAB_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_ne!(read(dir, "a.json"), read(dir, "c.json"));
    gen(dir, "d.json", &["--seed", "7"]);
    assert_eq!(read(dir, "c.json"), read(dir, "d.json"));
}

#[test]
fn graph_and_svm_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "d.json", &[]);
    let o = attnlab(&["build-graph", "--data", "d.json"], dir);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!v["graphs"].as_array().unwrap().is_empty());

    let o = attnlab(&["build-graph", "--data", "d.json", "--dot"], dir);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("digraph"));

    let o = attnlab(&["solve-svm", "--data", "d.json"], dir);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["status"], "solved");
    assert!(v["norm"].as_f64().unwrap() > 0.0);
    for key in ["fin", "active", "svm"] {
        assert!(v["subspace_dims"][key].is_u64());
    }
}

#[test]
fn train_then_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "d.json", &[]);
    std::fs::write(dir.join("cfg.json"), r#"{"iters": 50, "eta": 0.01, "normalized": true}"#).unwrap();
    let args = [
        "train", "--data", "d.json", "--config", "cfg.json", "--iters", "300", "--init", "gauss:0.1",
        "--record-every", "100", "--trace", "t.csv", "--summary", "s.json",
    ];
    let o = attnlab(&args, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = read(dir, "t.csv");
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iter,loss,loss_bar,grad_norm,w_norm,corr_svm,dist_fin"));
    // Flags override the file: 300 iterations recorded every 100.
    assert_eq!(lines.last().unwrap().split(',').next(), Some("300"));
    let s: serde_json::Value = serde_json::from_str(&read(dir, "s.json")).unwrap();
    for key in ["final_corr", "final_dist", "final_loss", "loss_inf", "wall_ms"] {
        assert!(s.get(key).is_some(), "{key}");
    }

    let o = attnlab(&["analyze", "--data", "d.json", "--trace", "t.csv"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["report"]["final_corr"].as_f64().unwrap() > 0.0);

    attnlab(&["train", "--data", "d.json", "--iters", "300", "--trace", "u.csv", "--summary", "u.json",
        "--init", "gauss:0.1", "--normalized", "--record-every", "100"], dir);
    assert_eq!(trace, read(dir, "u.csv"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "d.json", &[]);
    assert_eq!(code(&attnlab(&["train", "--data", "missing.json"], dir)), 2);
    assert_eq!(code(&attnlab(&["train", "--data", "d.json", "--eta=-1"], dir)), 2);
    assert_eq!(code(&attnlab(&["gen-data", "-K", "0"], dir)), 2);
    let o = attnlab(&["train", "--data", "d.json", "--eta", "1e300", "--iters", "5", "--trace", "t.csv"], dir);
    assert_eq!(code(&o), 4);
    let o = attnlab(
        &["exp", "acyclic-global", "--trials", "2", "--threshold", "mean_corr=1.5", "--out", "r"],
        dir,
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL mean_corr"));
}

#[test]
fn experiment_manifest_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = attnlab(&["exp", "cyclic-global", "--trials", "3", "--workers", "3", "--out", "a"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = attnlab(&["exp", "cyclic-global", "--config", "a/manifest.json", "--workers", "1", "--out", "b"], dir);
    assert_eq!(code(&o), 0);
    for f in ["manifest.json", "summary.json", "corr.csv", "dist.csv", "trace_000.csv", "trace_002.csv"] {
        assert_eq!(read(&dir.join("a"), f), read(&dir.join("b"), f), "{f}");
    }
    let csv = read(&dir.join("a"), "corr.csv");
    assert!(csv.starts_with("x,mean,stddev,trials\n"));

    let o = attnlab(&["exp", "scc-count", "--config", "a/manifest.json"], dir);
    assert_eq!(code(&o), 2);
}

#[test]
fn selftest_and_canary() {
    let tmp = tempfile::tempdir().unwrap();
    let o = attnlab(&["selftest"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = attnlab(&["selftest", "--corrupt-gradient"], tmp.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL gradient:"));
}
