use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_megagnn");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, task: &str, nodes: &str, seed: &str) -> Output {
    run(&["gen", "--task", task, "--nodes", nodes, "--seed", seed, "--out", s(dir)])
}

#[test]
fn gen_writes_the_csv_pair_deterministically() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let out = gen(&a, "max-of-sums", "500", "1");
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("3000 transactions"), "{text}");
    assert!(text.contains("500 accounts"), "{text}");
    assert!(gen(&b, "max-of-sums", "500", "1").status.success());
    for f in ["transactions.csv", "node_labels.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(gen(d.path(), "median-of-maxes", "50", "0").status.code(), Some(2));
    assert_eq!(run(&["check", "--suite", "nothing"]).status.code(), Some(2));
    let cfg = d.path().join("bad.conf");
    fs::write(&cfg, "learning-rate 3\n").unwrap();
    let out = run(&["train", "--data", "missing.csv", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--data", "missing.csv", "--bidirectional", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
    // One sender cannot produce a positive max-of-sums label.
    let out = run(&["gen", "--task", "max-of-sums", "--nodes", "20", "--senders", "1", "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_runtime_failure() {
    let out = run(&["train", "--data", "/nonexistent/tx.csv", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/tx.csv"));
}

#[test]
fn train_then_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert!(gen(&data, "out-neighbor-count", "80", "2").status.success());
    let tx = data.join("transactions.csv");
    let labels = data.join("node_labels.csv");
    let run_dir = d.path().join("run");
    let cfg = d.path().join("exp.conf");
    fs::write(&cfg, "# small run\nhidden = 6\nepochs = 3\nseeds = 0,1\nmodel = single-stage-gin\n").unwrap();
    let out = run(&[
        "train", "--data", s(&tx), "--labels", s(&labels), "--preset", "gin-eth", "--config", s(&cfg),
        "--model", "mega-gin", "--bidirectional", "off", "--ego-ids", "off", "--out", s(&run_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // The effective config is echoed and saved: flag beats file beats preset.
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["model"], "mega-gin");
    assert_eq!(echoed["hidden_size"], 6);
    assert_eq!(echoed["bidirectional"], false);
    assert_eq!(echoed["batch_size"], 4096);
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"hidden_size\":6"));

    // Summary mean matches the per-seed records.
    let f1 = |seed: u64| -> f64 {
        let r: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run_dir.join(format!("record_seed{seed}.json"))).unwrap()).unwrap();
        r["test"]["f1"].as_f64().unwrap()
    };
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    let mean = summary["test"]["mean"]["f1"].as_f64().unwrap();
    assert!((mean - (f1(0) + f1(1)) / 2.0).abs() < 1e-12);
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    // Evaluating the saved checkpoint reproduces the recorded test metrics.
    let ckpt = run_dir.join("checkpoint_seed1.json");
    let metrics_file = d.path().join("m.json");
    let out = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&tx), "--labels", s(&labels), "--out", s(&metrics_file)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics_file).unwrap()).unwrap();
    assert_eq!(m["f1"].as_f64().unwrap(), f1(1));
}

#[test]
fn eval_rejects_an_inconsistent_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert!(gen(&data, "out-neighbor-count", "60", "0").status.success());
    let tx = data.join("transactions.csv");
    let labels = data.join("node_labels.csv");
    let run_dir = d.path().join("run");
    let out = run(&[
        "train", "--data", s(&tx), "--labels", s(&labels), "--preset", "gin-eth", "--hidden", "4", "--epochs", "1",
        "--seeds", "0", "--out", s(&run_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let ckpt_text = fs::read_to_string(run_dir.join("checkpoint_seed0.json")).unwrap();
    let mut ckpt: serde_json::Value = serde_json::from_str(&ckpt_text).unwrap();
    let mut retasked = ckpt.clone();
    retasked["experiment"]["task"] = "edge".into();
    let p = d.path().join("retasked.json");
    fs::write(&p, retasked.to_string()).unwrap();
    let out = run(&["eval", "--checkpoint", s(&p), "--data", s(&tx), "--labels", s(&labels)]);
    assert_eq!(out.status.code(), Some(1));

    ckpt["version"] = 99.into();
    let stale = d.path().join("stale.json");
    fs::write(&stale, ckpt.to_string()).unwrap();
    let out = run(&["eval", "--checkpoint", s(&stale), "--data", s(&tx), "--labels", s(&labels)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn check_prints_a_json_report() {
    let out = run(&["check", "--suite", "port-witness", "--n", "4"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    let w = &v["suites"][0]["details"][0];
    assert_eq!(w["n"], 4);
    assert_ne!(w["embedding_a"], w["embedding_b"]);

    let out = run(&["check", "--suite", "node-ids", "--graphs", "20"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["suites"][0]["cases"], 20);

    let out = run(&["check", "--suite", "separation"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["suites"][0]["details"]["g2"]["max_of_sums"], 8.0);
}

#[test]
fn failing_suite_exits_with_one() {
    // A star on three nodes has no witness.
    let out = run(&["check", "--suite", "port-witness", "--n", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], false);
}
