//! Integration tests for the `graphgen` binary: exit codes and the
//! offline subcommand flows.

use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use graphgen_core::config::validate_config;
use graphgen_core::pipeline::run_pipeline_with;
use graphgen_core::testkit::MockModelBackend;

fn graphgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_corpus(path: &Path) {
    let mut lines = String::new();
    for i in 0..6 {
        let line = serde_json::json!({
            "id": format!("doc{i}"),
            "content": format!(
                "Passage {i}: protein alpha{i} interacts with enzyme beta{i} inside tissue \
                 gamma{i}. The compound delta{i} modulates this interaction strongly."
            ),
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    std::fs::write(path, lines).unwrap();
}

fn write_config(root: &Path, mode: &str) -> std::path::PathBuf {
    let raw = format!(
        r#"
mode = "{mode}"
cache_dir = "{cache}"

[input]
paths = ["{corpus}"]
format = "jsonl_content_field"
max_chunk_tokens = 64

[output]
path = "{out}"
"#,
        cache = root.join("cache").display(),
        corpus = root.join("corpus.jsonl").display(),
        out = root.join("qa.jsonl").display(),
    );
    let path = root.join(format!("config_{mode}.toml"));
    std::fs::write(&path, raw).unwrap();
    path
}

/// Records a cassette for the fixture corpus using the deterministic mock
/// backend, so the CLI can run entirely offline in replay mode.
fn record_fixture(root: &Path) {
    let raw = std::fs::read_to_string(write_config(root, "record")).unwrap();
    let cfg = validate_config(&raw).unwrap();
    let report = run_pipeline_with(&cfg, Some(Arc::new(MockModelBackend))).unwrap();
    assert!(report.succeeded(), "{report:?}");
    // keep the cassette, drop the stage caches so the CLI does real work
    for entry in std::fs::read_dir(root.join("cache")).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() != "cassette.jsonl" {
            std::fs::remove_file(path).unwrap();
        }
    }
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[traversal]\nmaxloss = true\n").unwrap();
    let out = graphgen(&["--config", path.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("maxloss"), "{stderr}");
}

#[test]
fn missing_config_file_exits_2() {
    let out = graphgen(&["--config", "/nonexistent/graphgen.toml", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_without_cassette_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus.jsonl"));
    let cfg = write_config(dir.path(), "replay");
    let out = graphgen(&["--config", cfg.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("cassette"), "{stderr}");
}

#[test]
fn kg_stats_without_cached_graph_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus.jsonl"));
    let cfg = write_config(dir.path(), "replay");
    let out = graphgen(&["--config", cfg.to_str().unwrap(), "kg", "stats"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn replay_run_and_inspection_flow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_corpus(&root.join("corpus.jsonl"));
    record_fixture(root);
    let cfg = write_config(root, "replay");
    let cfg = cfg.to_str().unwrap();

    let out = graphgen(&["--config", cfg, "run"]);
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("generate"), "{stdout}");
    assert!(root.join("qa.jsonl").exists());

    let out = graphgen(&["--config", cfg, "kg", "stats"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("entities:"), "{stdout}");

    let out = graphgen(&["--config", cfg, "assess", "hist", "--bins", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("bin_start,bin_end,count"), "{stdout}");
    assert_eq!(stdout.lines().count(), 6, "{stdout}");

    let manifest = root.join("plan.jsonl");
    let out = graphgen(&[
        "--config", cfg, "traverse", "plan", "--out", manifest.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let export = root.join("graph.json");
    let out = graphgen(&["--config", cfg, "kg", "export", "--out", export.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(export.exists());
}

#[test]
fn score_reports_metrics_and_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("qa.jsonl");
    let mut lines = String::new();
    for i in 0..4 {
        lines.push_str(
            &serde_json::json!({
                "instruction": format!("What does module {i} regulate in the larger system?"),
                "input": "",
                "output": format!("Module {i} regulates downstream signaling and growth."),
            })
            .to_string(),
        );
        lines.push('\n');
    }
    std::fs::write(&dataset, lines).unwrap();

    let scores = dir.path().join("scores.jsonl");
    std::fs::write(
        &scores,
        "{\"nat\":0.9,\"coh\":0.95,\"und\":0.92,\"ind\":4.0,\"deb\":1.0}\n",
    )
    .unwrap();

    let out = graphgen(&[
        "score",
        "--dataset",
        dataset.to_str().unwrap(),
        "--external-scores",
        scores.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("mtld"), "{stdout}");
    assert!(stdout.contains("s_avg"), "{stdout}");
}

#[test]
fn score_on_malformed_dataset_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("qa.jsonl");
    std::fs::write(&dataset, "{\"neither\": true}\n").unwrap();
    let out = graphgen(&["score", "--dataset", dataset.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
