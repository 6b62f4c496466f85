//! Drives the `annotator` binary end to end on the synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use annotator_core::gateway::ReplayFixture;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/synthetic_corpus.jsonl")
}

fn annotator(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_annotator"))
        .args(args)
        .arg("--corpus")
        .arg(corpus())
        .arg("--output-dir")
        .arg(work.join("out"))
        .arg("--cache-dir")
        .arg(work.join("cache"))
        .args(["--cap-per-division", "4", "--test-per-division", "4", "--seed", "11"])
        .env_remove("ANNOTATOR_API_KEY")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn manifest(work: &Path) -> serde_json::Value {
    let runs = work.join("out/runs");
    let run = fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn limited_run_resumes_from_cache() {
    let work = tempfile::tempdir().unwrap();
    stdout(&annotator(work.path(), &["sample"]));
    stdout(&annotator(work.path(), &["annotate", "--limit", "5"]));
    assert_eq!(manifest(work.path())["counts"]["total"], 5);

    let line = stdout(&annotator(work.path(), &["annotate"]));
    let m = manifest(work.path());
    assert_eq!(m["counts"]["total"], 32, "{line}");
    assert_eq!(m["counts"]["cache_hits"], 5);
    assert_eq!(m["backend_calls"], 27);

    let eval = stdout(&annotator(work.path(), &["evaluate", "--min-support", "2"]));
    assert!(eval.starts_with("macro "), "{eval}");
}

#[test]
fn strict_mode_exits_3_on_partial_failure() {
    let work = tempfile::tempdir().unwrap();
    stdout(&annotator(work.path(), &["sample"]));
    // Record real selections with the mock, then replay only one of them.
    stdout(&annotator(work.path(), &["annotate", "--limit", "1"]));
    let runs = work.path().join("out/runs");
    let run = fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    let selection: serde_json::Value =
        serde_json::from_str(fs::read_to_string(run.join("selections.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    let fixture = ReplayFixture {
        prompt_hash: selection["prompt_hash"].as_str().unwrap().to_string(),
        content: "Chemical Sciences".into(),
        finish_reason: "stop".into(),
    };
    let replay = work.path().join("replay.jsonl");
    fs::write(&replay, serde_json::to_string(&fixture).unwrap() + "\n").unwrap();
    fs::remove_dir_all(work.path().join("out/runs")).unwrap();

    let replay = replay.to_str().unwrap();
    let lenient = annotator(work.path(), &["annotate", "--backend", "replay", "--replay", replay]);
    assert!(lenient.status.success());
    let strict = annotator(work.path(), &["annotate", "--backend", "replay", "--replay", replay, "--strict"]);
    assert_eq!(strict.status.code(), Some(3), "{}", String::from_utf8_lossy(&strict.stderr));
}

#[test]
fn relevant_without_embedding_is_a_configuration_error() {
    let work = tempfile::tempdir().unwrap();
    stdout(&annotator(work.path(), &["sample"]));
    let out = annotator(work.path(), &["annotate", "--strategy", "relevant"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("configuration error"), "{err}");
    assert!(!work.path().join("out/runs").exists());
}

fn split_ids(work: &Path, seed: &str) -> (Vec<String>, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_annotator"))
        .arg("sample")
        .arg("--corpus")
        .arg(corpus())
        .arg("--output-dir")
        .arg(work.join(seed))
        .args(["--cap-per-division", "3", "--test-per-division", "3", "--seed", seed])
        .output()
        .unwrap();
    let counts = stdout(&out);
    let test = fs::read_to_string(work.join(seed).join("split/test_set.jsonl")).unwrap();
    let mut ids: Vec<String> = test
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_str().unwrap().to_string())
        .collect();
    ids.sort();
    (ids, counts.lines().filter(|l| !l.starts_with("wrote")).collect::<Vec<_>>().join("\n"))
}

#[test]
fn seed_changes_membership_not_counts() {
    let work = tempfile::tempdir().unwrap();
    let (a, counts_a) = split_ids(work.path(), "1");
    let (b, counts_b) = split_ids(work.path(), "2");
    assert_eq!(counts_a, counts_b);
    assert_eq!(a.len(), b.len());
    assert_ne!(a, b);
}

#[test]
fn taxonomy_validate_and_published_compare() {
    let work = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_annotator")).args(["taxonomy", "validate"]).output().unwrap();
    assert!(stdout(&out).contains("22 divisions"));

    let json = work.path().join("cmp.json");
    let out = Command::new(env!("CARGO_BIN_EXE_annotator"))
        .args(["compare", "published:random", "published:relevant", "--json", "--out"])
        .arg(&json)
        .output()
        .unwrap();
    stdout(&out);
    let cmp: serde_json::Value = serde_json::from_slice(&fs::read(json).unwrap()).unwrap();
    assert!((cmp["macro_delta"].as_f64().unwrap() - 0.0365).abs() < 1e-3);
}
