use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use tabsplus_core::ops;
use tabsplus_service::{router, AppState, Config};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn model() -> String {
    fixtures().join("supply_chain.bpmn").display().to_string()
}

fn traces() -> PathBuf {
    fixtures().join("traces")
}

fn tabsplus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabsplus")).args(args).env_remove("TABSPLUS_OUT").output().unwrap()
}

/// Runs with `--out -` and returns stdout, asserting success.
fn stdout(args: &[&str]) -> String {
    let mut all = args.to_vec();
    all.extend(["--out", "-"]);
    let out = tabsplus(&all);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

async fn api(app: &axum::Router, method: Method, uri: &str, body: impl Into<Body>) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

#[tokio::test]
async fn api_and_cli_outputs_are_byte_identical() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let plan_path = dir.path().join("plan.json");
    let plan = r#"{"schema":"tabsplus-plan/1","selections":[{"region":"S5"},{"region":"S1"},{"region":"S2"}],"mechanism":"sc-2m","crypto_cache":true}"#;
    std::fs::write(&plan_path, plan).unwrap();
    let p = plan_path.to_str().unwrap();
    let trace = traces().join("valid_04.jsonl");
    let trace_text = std::fs::read_to_string(&trace).unwrap();

    let app = router(AppState::new(Config::default()));
    let (_, created) = api(&app, Method::POST, "/sessions", std::fs::read_to_string(&m).unwrap()).await;
    let id = json(&created)["id"].as_str().unwrap().to_string();

    let (_, body) = api(&app, Method::GET, &format!("/sessions/{id}/analysis"), Body::empty()).await;
    assert_eq!(body, stdout(&["analyze", "--model", &m]));

    let (status, body) = api(&app, Method::PUT, &format!("/sessions/{id}/plan"), plan).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, stdout(&["plan-validate", "--model", &m, "--plan", p]));

    let (_, body) = api(&app, Method::POST, &format!("/sessions/{id}/generate?seed=3"), Body::empty()).await;
    assert_eq!(body, stdout(&["generate", "--model", &m, "--plan", p, "--seed", "3"]));

    let (_, body) = api(&app, Method::POST, &format!("/sessions/{id}/run"), trace_text).await;
    assert_eq!(body, stdout(&["run", "--model", &m, "--plan", p, "--seed", "3", "--trace", trace.to_str().unwrap()]));

    let (status, body) = api(&app, Method::GET, &format!("/sessions/{id}/cost?sizes=8KB,16KB"), Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, stdout(&["cost", "--model", &m, "--plan", p, "--sizes", "8KB,16KB"]));
}

#[test]
fn analyze_matches_the_library() {
    let m = model();
    let out = stdout(&["analyze", "--model", &m]);
    let (_, report) = ops::analyze(std::fs::read(&m).unwrap().as_slice()).unwrap();
    assert_eq!(out, ops::render(&report));
    assert_eq!(json(&out)["candidates"].as_array().unwrap().len(), 10);

    let csv = stdout(&["analyze", "--model", &m, "--format", "csv"]);
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("id,kind,entry,exit,parent,members\n"));
}

#[test]
fn output_directory_defaults_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let env_out = dir.path().join("from-env");
    let flag_out = dir.path().join("from-flag");
    let bin = env!("CARGO_BIN_EXE_tabsplus");

    let run = |extra: &[&str]| {
        Command::new(bin)
            .current_dir(dir.path())
            .args(["analyze", "--model", &m, "--dot"])
            .args(extra)
            .env("TABSPLUS_OUT", &env_out)
            .output()
            .unwrap()
    };
    let out = run(&[]);
    assert!(out.status.success());
    assert!(env_out.join("analysis.json").is_file());
    assert!(std::fs::read_to_string(env_out.join("graph.dot")).unwrap().starts_with("digraph"));
    // logs go to stderr, never to stdout
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("analysis.json"));

    assert!(run(&["--out", flag_out.to_str().unwrap()]).status.success());
    assert!(flag_out.join("analysis.json").is_file());

    let plain = Command::new(bin).current_dir(dir.path()).args(["analyze", "--model", &m]).env_remove("TABSPLUS_OUT").output().unwrap();
    assert!(plain.status.success());
    assert!(dir.path().join("out/analysis.json").is_file());
}

#[test]
fn generation_is_deterministic_and_seeded() {
    let m = model();
    let a = stdout(&["generate", "--model", &m, "--select", "S3,S4", "--mechanism", "sc-2s"]);
    let b = stdout(&["generate", "--model", &m, "--select", "S3,S4", "--mechanism", "sc-2s"]);
    assert_eq!(a, b);
    let c = stdout(&["generate", "--model", &m, "--select", "S3,S4", "--mechanism", "sc-2s", "--seed", "9"]);
    assert_ne!(json(&a)["cache_namespace_seed"], json(&c)["cache_namespace_seed"]);

    let empty = json(&stdout(&["generate", "--model", &m]));
    assert_eq!(empty["methods"]["methods"].as_array().unwrap().len(), 5);
}

#[test]
fn errors_exit_nonzero_with_a_structured_message() {
    let m = model();
    let out = tabsplus(&["plan-validate", "--model", &m, "--select", "S99", "--out", "-"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let err = String::from_utf8(out.stderr).unwrap();
    let body = json(err.strip_prefix("error: ").unwrap());
    assert_eq!(body["code"], "PlanRegionUnknown");

    let out = tabsplus(&["generate", "--model", &m, "--format", "csv", "--out", "-"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FormatUnsupported"));

    let out = tabsplus(&["analyze", "--model", "/nonexistent.bpmn"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("FileUnreadable"));

    let out = tabsplus(&["plan-validate", "--model", &m, "--mechanism", "sc-9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_reports_the_rejected_step_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(traces().join("valid_01.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(0, 1);
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let m = model();
    let out = tabsplus(&["run", "--model", &m, "--trace", bad.to_str().unwrap(), "--out", "-"]);
    assert_eq!(out.status.code(), Some(1));
    let report = json(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(report["valid"], false);
    assert_eq!(report["failing_step"], 0);
    assert_eq!(report["origin"], "mro1");

    let faults = dir.path().join("faults.json");
    std::fs::write(&faults, r#"{"revert_at":["rw"]}"#).unwrap();
    let good = traces().join("valid_01.jsonl");
    let args = ["run", "--model", &m, "--select", "S3", "--trace", good.to_str().unwrap(), "--faults", faults.to_str().unwrap(), "--out", "-"];
    let out = tabsplus(&args);
    assert_eq!(out.status.code(), Some(1));
    let report = json(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(report["report"]["txn_states"]["S3"], "aborted");
}

#[test]
fn trace_check_classifies_a_directory() {
    let m = model();
    let pkg_dir = tempfile::tempdir().unwrap();
    let out = tabsplus(&["generate", "--model", &m, "--select", "S3,S5,S1,S2", "--out", pkg_dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let pkg = pkg_dir.path().join("package.json");
    let summary = json(&stdout(&["trace-check", "--package", pkg.to_str().unwrap(), "--traces", traces().to_str().unwrap()]));
    assert_eq!(summary["total"], summary["valid"]);
    assert!(summary["total"].as_u64().unwrap() >= 10);

    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(traces().join("valid_02.jsonl"), dir.path().join("a.jsonl")).unwrap();
    std::fs::write(dir.path().join("b.jsonl"), "{\"actor\":\"buyer\",\"origin\":\"calc\"}\n").unwrap();
    std::fs::write(dir.path().join("c.jsonl"), "nope\n").unwrap();
    std::fs::write(dir.path().join("ignored.txt"), "x").unwrap();
    let out = tabsplus(&["trace-check", "--package", pkg.to_str().unwrap(), "--traces", dir.path().to_str().unwrap(), "--format", "csv", "--out", "-"]);
    // an unreadable trace is an error; an invalid one is a finding
    assert_eq!(out.status.code(), Some(1));
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("a.jsonl,true"));
    assert!(rows[2].starts_with("b.jsonl,false,0,calc"));
    assert!(rows[3].ends_with("TraceSyntax"));
}

#[test]
fn cost_table_covers_every_variant_and_size() {
    let m = model();
    let t = json(&stdout(&["cost", "--model", &m, "--select", "S1,S2", "--sizes", "4KB,8KB,16KB,32KB"]));
    assert_eq!(t["rows"].as_array().unwrap().len(), 20);
    assert_eq!(t["fits"].as_object().unwrap().len(), 5);

    let dir = tempfile::tempdir().unwrap();
    let sched = dir.path().join("gas.json");
    let mut s = serde_json::to_value(tabsplus_core::ledger::GasSchedule::default()).unwrap();
    s["per_write_byte"] = 1.into();
    std::fs::write(&sched, s.to_string()).unwrap();
    let cheap = json(&stdout(&["cost", "--sizes", "8KB", "--gas-schedule", sched.to_str().unwrap()]));
    let dear = json(&stdout(&["cost", "--sizes", "8KB"]));
    assert!(cheap["rows"][0]["gas"].as_u64() < dear["rows"][0]["gas"].as_u64());
    let pkg = json(&stdout(&["generate", "--model", &m, "--gas-schedule", sched.to_str().unwrap()]));
    assert_eq!(pkg["gas_schedule_ref"], sched.to_str().unwrap());
}

#[test]
fn calibration_and_two_phase_commit_reports() {
    let two_pc = stdout(&["cost", "--two-pc", "--format", "csv"]);
    assert_eq!(two_pc.lines().count(), 6);

    let dir = tempfile::tempdir().unwrap();
    let out = tabsplus(&["cost", "--calibrate", "--sizes", "512KB,1875KB", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cal = json(&std::fs::read_to_string(dir.path().join("calibration.json")).unwrap());
    assert!(cal["error"].as_f64().unwrap() <= 0.01);
    let table = json(&std::fs::read_to_string(dir.path().join("cost.json")).unwrap());
    assert_eq!(table["schedule"], cal["schedule"]);
    assert_eq!(table["rows"].as_array().unwrap().len(), 10);
}
