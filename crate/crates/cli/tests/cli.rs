//! End-to-end runs of the binary on a tiny trained model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_calibprune"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpora A and B plus a briefly trained micro-model.
fn workspace(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let (a, b, model) = (
        dir.join("a.jsonl"),
        dir.join("b.jsonl"),
        dir.join("model.bin"),
    );
    run(&[
        "fixture",
        "--kind",
        "english",
        "--out",
        s(&a),
        "--docs",
        "20",
        "--doc-bytes",
        "300",
        "--seed",
        "1",
    ]);
    run(&[
        "fixture",
        "--kind",
        "code",
        "--out",
        s(&b),
        "--docs",
        "20",
        "--doc-bytes",
        "300",
        "--seed",
        "2",
    ]);
    let mc = dir.join("model.json");
    std::fs::write(
        &mc,
        r#"{"vocab_size": 257, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 32}"#,
    )
    .unwrap();
    run(&[
        "train",
        "--corpus",
        s(&a),
        "--out",
        s(&model),
        "--model-config",
        s(&mc),
        "--steps",
        "20",
        "--batch-size",
        "4",
        "--seq-len",
        "32",
        "--lr",
        "3e-3",
    ]);
    (a, b, model)
}

fn experiment_config(dir: &Path, a: &Path, b: &Path, model: &Path, sparsity: &str) -> PathBuf {
    let cfg = serde_json::json!({
        "model_path": model,
        "calib_sources": [
            {"label": "A", "path": a, "mode": "sampled"},
            {"label": "B-gen", "path": b, "mode": "self_generated"}
        ],
        "pruning": {"method": "wanda", "sparsity": ["0.5", sparsity]},
        "n": 4, "L": 32, "replicates": 2, "seed": 3,
        "eval_corpus": a, "eval_windows": 8,
        "output_dir": dir.join("unused"),
        "generation": {"prefix_len": 4, "max_len": 32, "top_k": 50, "top_p": 0.95,
                       "temperature": 0.6, "repetition_penalty": 1.2},
        "n_gen": 8
    });
    let path = dir.join(format!("exp-{}.json", sparsity.replace(':', "-")));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn experiment_is_deterministic_and_reports_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, model) = workspace(dir.path());
    let cfg = experiment_config(dir.path(), &a, &b, &model, "2:4");
    let (o1, o2) = (dir.path().join("run1"), dir.path().join("run2"));
    let out = run(&["experiment", "--config", s(&cfg), "--output-dir", s(&o1)]);
    run(&["experiment", "--config", s(&cfg), "--output-dir", s(&o2)]);
    let (r1, r2) = (
        std::fs::read(o1.join("report.json")).unwrap(),
        std::fs::read(o2.join("report.json")).unwrap(),
    );
    assert_eq!(r1, r2);
    assert!(o1.join("report.txt").exists());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("B-gen") && table.contains("2:4"), "{table}");

    // 3:7 does not divide the 16-wide layers: those cells fail, the rest run.
    let bad = experiment_config(dir.path(), &a, &b, &model, "3:7");
    let o3 = dir.path().join("run3");
    let st = bin()
        .args(["experiment", "--config", s(&bad), "--output-dir", s(&o3)])
        .output()
        .unwrap()
        .status;
    assert_eq!(st.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(o3.join("report.json")).unwrap()).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert!(cells.iter().any(|c| c["error"].is_string()));
    assert!(cells.iter().any(|c| c["perplexity"].is_number()));

    let missing = bin()
        .args(["experiment", "--config", s(&dir.path().join("nope.json"))])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));
}

#[test]
fn prune_eval_and_diagnostics_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, model) = workspace(dir.path());
    let calib = dir.path().join("calib.json");
    run(&[
        "sample",
        "--corpus",
        s(&a),
        "--out",
        s(&calib),
        "--n",
        "4",
        "--seqlen",
        "32",
        "--seed",
        "5",
    ]);
    let pruned = dir.path().join("pruned.bin");
    let out = run(&[
        "prune",
        "--model",
        s(&model),
        "--calib",
        s(&calib),
        "--out",
        s(&pruned),
        "--method",
        "wanda",
        "--sparsity",
        "2:4",
    ]);
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((plan["mean_sparsity"].as_f64().unwrap() - 0.5).abs() < 1e-9);

    let eval = |m: &Path| -> f64 {
        let out = run(&["eval", "--model", s(m), "--corpus", s(&a), "--windows", "8"]);
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        v["perplexity"].as_f64().unwrap()
    };
    let (dense, sparse) = (eval(&model), eval(&pruned));
    assert!(dense.is_finite() && sparse.is_finite() && dense > 1.0);

    let out = run(&["minkpp", "--model", s(&model), "--calib", s(&calib)]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 4);

    let (gen, filtered) = (
        dir.path().join("gen.jsonl"),
        dir.path().join("filtered.jsonl"),
    );
    run(&[
        "generate",
        "--model",
        s(&model),
        "--corpus",
        s(&b),
        "--out",
        s(&gen),
        "--n-gen",
        "10",
        "--max-len",
        "32",
        "--seed",
        "1",
    ]);
    run(&[
        "filter",
        "--input",
        s(&gen),
        "--out",
        s(&filtered),
        "--filter-rate",
        "0.2",
    ]);
    let out = run(&["minkpp", "--model", s(&model), "--calib", s(&filtered)]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 8);

    let out = run(&["similarity", "--a", s(&a), "--b", s(&b), "--exact"]);
    let sim: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(sim["estimate"].as_f64().unwrap() < 0.5);
    assert!(sim["exact"].is_number());
}
