use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hybridrank"));
    c.env_remove("HYBRIDRANK_THREADS");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn hybridrank")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SMALL_WORLD: &[&str] = &[
    "gen-synth",
    "--out",
    "w",
    "--num-classes",
    "20",
    "--d-c",
    "8",
    "--d-i",
    "8",
    "--db-items-per-class",
    "10",
    "--images-per-class-per-generator",
    "6",
];

const SMALL_TRAIN: &[&str] = &[
    "train",
    "--train",
    "w/train.json",
    "--out",
    "ckpt.bin",
    "--steps",
    "30",
    "--classes-per-batch",
    "6",
    "--queries-per-class",
    "2",
];

/// Runs every subcommand in `dir` with the given thread count.
fn pipeline(dir: &Path, threads: &str) {
    let with_threads = |args: &[&str]| {
        let mut v = vec!["--threads", threads];
        v.extend_from_slice(args);
        ok(dir, &v);
    };
    with_threads(SMALL_WORLD);
    with_threads(SMALL_TRAIN);
    with_threads(&[
        "eval",
        "--db",
        "w/db.json",
        "--queries",
        "w/queries.json",
        "--checkpoint",
        "ckpt.bin",
        "--k",
        "3",
        "--out",
        "report.json",
        "--per-query-csv",
        "per_query.csv",
    ]);
    with_threads(&["export-report", "--report", "report.json", "--out", "report.csv"]);
    with_threads(&[
        "query",
        "--db",
        "w/db.json",
        "--queries",
        "w/queries.json",
        "--checkpoint",
        "ckpt.bin",
        "--query-id",
        "2",
        "--k",
        "2",
        "--out",
        "ranked.json",
    ]);
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let files = files_under(a);
    assert_eq!(files, files_under(b));
    for rel in &files {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel:?} differs");
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let one = TempDir::new().unwrap();
    let four = TempDir::new().unwrap();
    pipeline(one.path(), "1");
    pipeline(four.path(), "4");
    assert_same_tree(one.path(), four.path());
}

#[test]
fn env_thread_count_is_used_and_validated() {
    let dir = TempDir::new().unwrap();
    let out = bin().current_dir(dir.path()).env("HYBRIDRANK_THREADS", "0").args(SMALL_WORLD).output().unwrap();
    assert_eq!(code(&out), 1);
    let out = bin().current_dir(dir.path()).env("HYBRIDRANK_THREADS", "abc").args(SMALL_WORLD).output().unwrap();
    assert_eq!(code(&out), 1);
    // the flag wins over a bad env value
    let out = bin()
        .current_dir(dir.path())
        .env("HYBRIDRANK_THREADS", "abc")
        .args(["--threads", "2"])
        .args(SMALL_WORLD)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&bin().arg("--help").output().unwrap()), 0);
    assert_eq!(code(&bin().arg("--version").output().unwrap()), 0);
    assert_eq!(code(&bin().args(["eval", "--help"]).output().unwrap()), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run_in(dir.path(), &["bogus"])), 1);
    assert_eq!(code(&run_in(dir.path(), &["eval", "--nope"])), 1);
    assert_eq!(code(&run_in(dir.path(), &["train", "--steps", "many"])), 1);
    // missing required input
    assert_eq!(code(&run_in(dir.path(), &["train", "--out", "x.bin"])), 1);
    assert_eq!(code(&run_in(dir.path(), &["--threads", "0", "gen-synth", "--out", "w"])), 1);
    assert!(!dir.path().join("w").exists());
}

#[test]
fn config_file_is_overlaid_by_flags() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(
        d.join("cfg.json"),
        r#"{"out": "w", "num-classes": 20, "d_c": 8, "d_i": 8, "seed": 5, "db_items_per_class": 10}"#,
    )
    .unwrap();
    ok(d, &["gen-synth", "--config", "cfg.json", "--seed", "9"]);
    let manifest: Value = serde_json::from_slice(&fs::read(d.join("w/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "gen-synth");
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["num_classes"], 20);
    assert_eq!(manifest["config"]["d_i"], 8);
    // unset keys are resolved to their defaults
    assert_eq!(manifest["config"]["num_generators"], 3);
    assert!(manifest["outputs"].as_array().unwrap().len() > 4);
}

#[test]
fn unknown_or_malformed_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"out": "w", "num_clases": 20}"#).unwrap();
    assert_eq!(code(&run_in(d, &["gen-synth", "--config", "bad.json"])), 1);
    fs::write(d.join("typed.json"), r#"{"out": "w", "num_classes": "many"}"#).unwrap();
    assert_eq!(code(&run_in(d, &["gen-synth", "--config", "typed.json"])), 1);
    fs::write(d.join("list.json"), r#"[1, 2]"#).unwrap();
    assert_eq!(code(&run_in(d, &["gen-synth", "--config", "list.json"])), 1);
    assert!(!d.join("w").exists());
}

#[test]
fn manifest_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, SMALL_WORLD);
    ok(d, SMALL_TRAIN);
    let manifest: Value = serde_json::from_slice(&fs::read(d.join("ckpt.bin.run.json")).unwrap()).unwrap();
    let mut cfg = manifest["config"].clone();
    cfg["out"] = "again.bin".into();
    cfg["log"] = "again.log.jsonl".into();
    fs::write(d.join("again.json"), serde_json::to_vec(&cfg).unwrap()).unwrap();
    ok(d, &["train", "--config", "again.json"]);
    assert_eq!(fs::read(d.join("ckpt.bin")).unwrap(), fs::read(d.join("again.bin")).unwrap());
    assert_eq!(
        fs::read(d.join("ckpt.bin.log.jsonl")).unwrap(),
        fs::read(d.join("again.log.jsonl")).unwrap()
    );
    let outputs = manifest["outputs"].as_array().unwrap();
    let ckpt = outputs.iter().find(|r| r["path"] == "ckpt.bin").unwrap();
    assert_eq!(ckpt["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn dimension_mismatch_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, SMALL_WORLD);
    ok(d, SMALL_TRAIN);
    let mut other: Vec<&str> = SMALL_WORLD.to_vec();
    other[2] = "w16";
    let pos = other.iter().position(|a| *a == "--d-i").unwrap();
    other[pos + 1] = "16";
    ok(d, &other);
    let out = run_in(
        d,
        &[
            "eval",
            "--db",
            "w16/db.json",
            "--queries",
            "w16/queries.json",
            "--checkpoint",
            "ckpt.bin",
            "--out",
            "report.json",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
    assert!(!d.join("report.json").exists());
    assert!(!d.join("report.json.run.json").exists());
}

#[test]
fn empty_image_set_for_ours_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, SMALL_WORLD);
    ok(d, SMALL_TRAIN);
    let out = run_in(
        d,
        &[
            "query",
            "--db",
            "w/db.json",
            "--queries",
            "w/queries.json",
            "--checkpoint",
            "ckpt.bin",
            "--query-id",
            "2",
            "--mode",
            "ours",
            "--k",
            "0",
            "--out",
            "ranked.json",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs image queries"));
    assert!(!d.join("ranked.json").exists());
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, SMALL_WORLD);
    ok(d, SMALL_TRAIN);
    let mut bytes = fs::read(d.join("ckpt.bin")).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(d.join("short.bin"), &bytes).unwrap();
    let out = run_in(
        d,
        &["eval", "--db", "w/db.json", "--queries", "w/queries.json", "--checkpoint", "short.bin", "--out", "r.json"],
    );
    assert_eq!(code(&out), 2);
    assert!(!d.join("r.json").exists());
}

#[test]
fn modes_needing_a_checkpoint_require_one() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, SMALL_WORLD);
    let out = run_in(
        d,
        &["eval", "--db", "w/db.json", "--queries", "w/queries.json", "--modes", "ours", "--out", "r.json"],
    );
    assert_eq!(code(&out), 1);
    // parameter-free modes run without one
    ok(
        d,
        &["eval", "--db", "w/db.json", "--queries", "w/queries.json", "--out", "r.json", "--format", "csv"],
    );
    let csv = fs::read_to_string(d.join("r.json")).unwrap();
    assert!(csv.starts_with("mode,metric,value\n"));
    assert!(csv.contains("text-only,mAP,"));
    assert!(!csv.contains("ours,"));
}

#[test]
fn query_file_with_several_queries_needs_an_id() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, SMALL_WORLD);
    let out = run_in(
        d,
        &["query", "--db", "w/db.json", "--queries", "w/queries.json", "--mode", "text-only", "--out", "q.json"],
    );
    assert_eq!(code(&out), 1);
    ok(
        d,
        &[
            "query",
            "--db",
            "w/db.json",
            "--queries",
            "w/queries.json",
            "--mode",
            "text-only",
            "--query-id",
            "2",
            "--top-k",
            "4",
            "--out",
            "q.json",
        ],
    );
    let ranked: Value = serde_json::from_slice(&fs::read(d.join("q.json")).unwrap()).unwrap();
    let ranked = ranked.as_array().unwrap();
    assert_eq!(ranked.len(), 4);
    for (i, r) in ranked.iter().enumerate() {
        assert_eq!(r["rank"], i + 1);
    }
    let scores: Vec<f64> = ranked.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn export_round_trips_the_report() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, SMALL_WORLD);
    ok(d, &["eval", "--db", "w/db.json", "--queries", "w/queries.json", "--out", "r.json"]);
    ok(d, &["export-report", "--report", "r.json", "--format", "json", "--out", "r2.json"]);
    assert_eq!(fs::read(d.join("r.json")).unwrap(), fs::read(d.join("r2.json")).unwrap());
    ok(d, &["eval", "--db", "w/db.json", "--queries", "w/queries.json", "--out", "r.csv", "--format", "csv"]);
    ok(d, &["export-report", "--report", "r.json", "--out", "r3.csv"]);
    assert_eq!(fs::read(d.join("r.csv")).unwrap(), fs::read(d.join("r3.csv")).unwrap());
}
