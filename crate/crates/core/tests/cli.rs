use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Copies the fixture directory so a test can edit the config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixtures()).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patent-sdg"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .args(args)
        .output()
        .unwrap()
}

fn manifest(out: &Path, command: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join(format!("manifest_{command}.json"))).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn label_writes_one_record_per_patent() {
    let dir = workspace();
    let out = run(dir.path(), &["label"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let silver = fs::read_to_string(dir.path().join("out/silver.jsonl")).unwrap();
    let ids: Vec<String> = silver
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["patent_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids, ["US-0001", "US-0002", "US-0003"]);

    let m = manifest(&dir.path().join("out"), "label");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 7);
    assert!(m["inputs"]["patents"].as_str().unwrap().len() == 64);
    assert!(m["artifacts"]["silver.jsonl"].is_string());
}

#[test]
fn modularity_flags_select_one_configuration() {
    let dir = workspace();
    assert!(run(dir.path(), &["label"]).status.success());
    let out = run(
        dir.path(),
        &["modularity", "--p", "0.35", "--kind", "citation", "--method", "silver"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("out/modularity.csv"));
    assert_eq!(rows.len(), 1);
    let head: Vec<&str> = rows[0].iter().take(3).collect();
    assert_eq!(head, ["citation", "silver", "0.35"]);
}

#[test]
fn invalid_config_names_the_field() {
    let dir = workspace();
    let config = dir.path().join("config.toml");
    let text = fs::read_to_string(&config).unwrap().replace("top_n = 3", "top_n = 0");
    fs::write(&config, text).unwrap();
    let out = run(dir.path(), &["label"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("top_n"), "{stderr}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = workspace();
    let config = dir.path().join("config.toml");
    let text = fs::read_to_string(&config).unwrap().replace("[labeling]", "[labeling]\ntau_functoin = 0.4");
    fs::write(&config, text).unwrap();
    let out = run(dir.path(), &["label"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau_functoin"));
}

#[test]
fn failed_rerun_marks_previous_outputs_stale() {
    let dir = workspace();
    assert!(run(dir.path(), &["label"]).status.success());
    fs::remove_file(dir.path().join("sdg_corpus.jsonl")).unwrap();
    let out = run(dir.path(), &["label"]);
    assert_eq!(out.status.code(), Some(1));
    let m = manifest(&dir.path().join("out"), "label");
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("sdg_corpus"));
    assert_eq!(m["stale"], serde_json::json!(["silver.jsonl"]));
}

#[test]
fn split_query_writes_parts_within_budget() {
    let dir = workspace();
    let parts_dir = dir.path().join("parts");
    let out = run(
        dir.path(),
        &[
            "split-query",
            "--in",
            dir.path().join("query.txt").to_str().unwrap(),
            "--out",
            parts_dir.to_str().unwrap(),
            "--max-chars",
            "120",
            "--check",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut parts: Vec<PathBuf> = fs::read_dir(&parts_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    parts.sort();
    assert!(parts.len() >= 2);
    for p in &parts {
        assert!(fs::read_to_string(p).unwrap().trim_end().chars().count() <= 120);
    }
    assert!(parts_dir.join("parts.json").exists());
}

#[test]
fn calibrate_then_label_with_best_params() {
    let dir = workspace();
    let space = dir.path().join("space.json");
    let out = run(dir.path(), &["calibrate", "--space", space.to_str().unwrap(), "--budget", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = dir.path().join("out");
    let trials = fs::read_to_string(out_dir.join("trials.jsonl")).unwrap();
    assert_eq!(trials.lines().count(), 10);
    let best = out_dir.join("best_params.json");
    let out = run(dir.path(), &["label", "--params", best.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_reports_every_method() {
    let dir = workspace();
    assert!(run(dir.path(), &["label"]).status.success());
    let out = run(dir.path(), &["evaluate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("out/recall_summary.csv"));
    let methods: Vec<&str> = rows.iter().map(|r| r.get(0).unwrap()).collect();
    assert!(methods.contains(&"silver") && methods.contains(&"bm25"), "{methods:?}");
    assert_eq!(csv_rows(&dir.path().join("out/ablation.csv")).len(), 7);
}

#[test]
fn regress_writes_model_and_errors() {
    let dir = workspace();
    assert!(run(dir.path(), &["label"]).status.success());
    let out = run(dir.path(), &["regress"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = dir.path().join("out");
    assert_eq!(csv_rows(&out_dir.join("history.csv")).len(), 200);
    let errors = csv_rows(&out_dir.join("regression_errors.csv"));
    assert!(errors.iter().any(|r| r.get(0) == Some("train") && r.get(1) == Some("all")));
    assert!(out_dir.join("model.json").exists());
}

#[test]
fn usage_errors_exit_one() {
    let out = Command::new(env!("CARGO_BIN_EXE_patent-sdg")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_patent-sdg")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
