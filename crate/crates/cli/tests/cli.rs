use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gintrip_core::data::{load_dataset, LoadOptions};
use gintrip_core::ParameterStore;
use tempfile::TempDir;

fn gintrip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gintrip")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gintrip(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small planted dataset plus its starter config.
fn synth(dir: &Path, sigma: &str, seed: &str) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--out", p(&data), "--nodes", "8", "--informative", "3", "--steps", "600", "--sigma", sigma, "--seed", seed]);
    data.join("run.json")
}

#[test]
fn help_lists_commands_and_flags() {
    let top = ok(&["--help"]);
    for cmd in ["train", "eval", "explain", "synth", "report"] {
        assert!(top.contains(cmd), "{cmd} missing from help");
    }
    let eval = ok(&["eval", "--help"]);
    for flag in ["--config", "--checkpoint", "--ks", "--fidelity-convention", "--seed", "--out"] {
        assert!(eval.contains(flag), "{flag} missing from eval help");
    }
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    assert_eq!(gintrip(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(gintrip(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_file_names_the_path() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"data": {"signal": "absent.bin", "graph": "graph.csv"}}"#).unwrap();
    let out = gintrip(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.bin"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = synth(dir.path(), "0.1", "1");
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    doc["train"] = serde_json::json!({"epochz": 3});
    fs::write(&cfg, doc.to_string()).unwrap();
    let out = gintrip(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn numeric_blowup_exits_with_numeric_code() {
    let dir = TempDir::new().unwrap();
    let cfg = synth(dir.path(), "0.1", "2");
    let out = gintrip(&["train", "--config", p(&cfg), "--epochs", "3", "--lr", "1e300", "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn train_is_deterministic_and_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = synth(dir.path(), "0.1", "3");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--config", p(&cfg), "--epochs", "3", "--seed", "7", "--out", p(out)]);
    }
    for file in ["checkpoint.bin", "history.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let config = |dir: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("out");
        v
    };
    // Only the recorded output directory differs.
    assert_eq!(config(&a), config(&b));
    let resolved = config(&a);
    assert_eq!(resolved["train"]["seed"], 7);
    assert_eq!(resolved["train"]["epochs"], 3);
    assert_eq!(fs::read_to_string(a.join("history.csv")).unwrap().lines().count(), 4);

    let c = dir.path().join("c");
    ok(&["train", "--config", p(&cfg), "--epochs", "3", "--seed", "8", "--out", p(&c)]);
    assert_ne!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(c.join("checkpoint.bin")).unwrap());
}

#[test]
fn zero_epochs_keeps_initialization() {
    let dir = TempDir::new().unwrap();
    let cfg = synth(dir.path(), "0.1", "4");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", p(&cfg), "--epochs", "0", "--out", p(&a)]);
    ok(&["train", "--config", p(&cfg), "--epochs", "2", "--lr", "0", "--out", p(&b)]);
    let ca = ParameterStore::load(&a.join("checkpoint.bin")).unwrap();
    let cb = ParameterStore::load(&b.join("checkpoint.bin")).unwrap();
    for (name, m) in ca.iter().filter(|(n, _)| !n.starts_with("meta.")) {
        assert_eq!(Some(m), cb.get(name), "{name}");
    }
    assert_eq!(ca.require("meta.trained_epochs").unwrap()[[0, 0]], 0.0);
}

#[test]
fn eval_outputs_are_reproducible_and_fidelity_is_optional() {
    let dir = TempDir::new().unwrap();
    let cfg = synth(dir.path(), "0.1", "5");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--epochs", "2", "--out", p(&run)]);
    let resolved = run.join("config.json");

    let plain = dir.path().join("plain");
    ok(&["eval", "--config", p(&resolved), "--out", p(&plain)]);
    assert!(plain.join("metrics.json").exists());
    assert!(!plain.join("fidelity.csv").exists());
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(plain.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["rmse"].as_f64().unwrap() >= metrics["mae"].as_f64().unwrap());

    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    for out in [&x, &y] {
        ok(&["eval", "--config", p(&resolved), "--ks", "3,1,8", "--out", p(out)]);
    }
    for file in ["metrics.json", "fidelity.csv"] {
        assert_eq!(fs::read(x.join(file)).unwrap(), fs::read(y.join(file)).unwrap(), "{file}");
    }
    let csv = fs::read_to_string(x.join("fidelity.csv")).unwrap();
    let ks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["1", "3", "8"]);

    let paper = dir.path().join("paper");
    ok(&["eval", "--config", p(&resolved), "--ks", "3,1,8", "--fidelity-convention", "paper", "--out", p(&paper)]);
    let swapped = fs::read_to_string(paper.join("fidelity.csv")).unwrap();
    for (a, b) in csv.lines().skip(1).zip(swapped.lines().skip(1)) {
        let a: Vec<&str> = a.split(',').collect();
        let b: Vec<&str> = b.split(',').collect();
        assert_eq!((a[1], a[2]), (b[2], b[1]));
    }
}

#[test]
fn trained_model_beats_untrained_on_noiseless_data() {
    let dir = TempDir::new().unwrap();
    let cfg = synth(dir.path(), "0", "6");
    let (untrained, trained) = (dir.path().join("u"), dir.path().join("t"));
    ok(&["train", "--config", p(&cfg), "--epochs", "0", "--out", p(&untrained)]);
    ok(&["train", "--config", p(&cfg), "--epochs", "40", "--out", p(&trained)]);
    let mae = |run: &Path| {
        let out = run.join("eval");
        ok(&["eval", "--config", p(&run.join("config.json")), "--out", p(&out)]);
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        m["mae"].as_f64().unwrap()
    };
    let (u, t) = (mae(&untrained), mae(&trained));
    assert!(u > t, "untrained {u} vs trained {t}");
}

#[test]
fn explain_lists_k_nodes_per_window_and_grounds_prototypes() {
    let dir = TempDir::new().unwrap();
    let cfg = synth(dir.path(), "0.1", "7");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--epochs", "1", "--out", p(&run)]);
    let resolved = run.join("config.json");
    for k in [2usize, 8] {
        let out = dir.path().join(format!("k{k}"));
        ok(&["explain", "--config", p(&resolved), "--k", &k.to_string(), "--split", "all", "--out", p(&out)]);
        let csv = fs::read_to_string(out.join("explanation.csv")).unwrap();
        let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
        let windows: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(rows.len(), windows.len() * k);
        if k == 8 {
            for w in &windows {
                let nodes: std::collections::BTreeSet<&str> =
                    rows.iter().filter(|r| r[0] == *w).map(|r| r[1].as_str()).collect();
                assert_eq!(nodes.len(), 8);
            }
        }
        let protos: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("prototypes.json")).unwrap()).unwrap();
        assert_eq!(protos.as_array().unwrap().len(), 4);
        assert_eq!(protos[0]["nodes"].as_array().unwrap().len(), k);
    }
    let bad = gintrip(&["explain", "--config", p(&resolved), "--k", "9", "--out", p(&dir.path().join("bad"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn synth_is_reproducible_and_round_trips() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--out", p(out), "--nodes", "6", "--informative", "2", "--steps", "120", "--seed", "3"]);
    }
    for file in ["graph.csv", "signal.bin", "meta.json", "truth.json", "run.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let (graph, signal) = load_dataset(&a.join("signal.bin"), &a.join("graph.csv"), LoadOptions { zero_is_missing: false }).unwrap();
    assert_eq!(graph.n_nodes(), 6);
    assert_eq!(signal.n_steps(), 120);
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["informative_nodes"].as_array().unwrap().len(), 2);

    let bad = gintrip(&["synth", "--out", p(&dir.path().join("c")), "--nodes", "4", "--informative", "4"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn report_summarizes_a_run() {
    let dir = TempDir::new().unwrap();
    let cfg = synth(dir.path(), "0.1", "8");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--epochs", "2", "--out", p(&run)]);
    ok(&["eval", "--config", p(&run.join("config.json")), "--ks", "2", "--out", p(&run)]);
    let text = ok(&["report", "--run", p(&run)]);
    assert!(text.contains("epochs: 2"));
    assert!(text.contains("best val MAE"));
    assert!(text.contains("k,fidelity_plus,fidelity_minus"));
    assert_eq!(gintrip(&["report", "--run", p(&dir.path().join("none"))]).status.code(), Some(2));
}
