use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use umphcs::records::RecordStore;
use umphcs::session::SessionLock;
use umphcs::sync::{ServerStore, SyncServer};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_umphcs"));
    c.env_remove("UMPHCS_STORE").env_remove("UMPHCS_SYNC_ENDPOINT").env("RUST_LOG", "off");
    c
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data").join(name)
}

struct Ws {
    dir: TempDir,
}

impl Ws {
    fn new() -> Self {
        Ws { dir: TempDir::new().unwrap() }
    }

    fn store(&self) -> PathBuf {
        self.dir.path().join("store.jsonl")
    }

    fn run(&self, args: &[&str]) -> Output {
        bin().arg("--store").arg(self.store()).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn with_patient() -> Self {
        let ws = Ws::new();
        ws.ok(&["patient", "add", "p1", "--name", "Asha", "--region", "north"]);
        ws
    }
}

/// Exactly one JSON error line on stderr; returns its code.
fn error_code(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert!(v["error"]["message"].is_string());
    v["error"]["code"].as_str().unwrap().to_owned()
}

fn json_measure(ws: &Ws, args: &[&str]) -> Value {
    let mut all = vec!["measure"];
    all.extend_from_slice(args);
    all.extend_from_slice(&["--patient", "p1", "--json"]);
    serde_json::from_str(ws.ok(&all).trim()).unwrap()
}

#[test]
fn patients_add_and_list() {
    let ws = Ws::new();
    ws.ok(&["patient", "add", "p1", "--name", "Asha", "--region", "north"]);
    ws.ok(&["patient", "add", "p2", "--name", "Bilal", "--region", "south"]);
    let list = ws.ok(&["patient", "list"]);
    assert_eq!(list.lines().count(), 2);
    assert!(list.contains("\"patient_id\":\"p2\""));
    assert_eq!(error_code(&ws.run(&["patient", "add", "p1", "--name", "Other", "--region", "x"])), "RecordConflict");
}

#[test]
fn temperature_measurement_is_saved() {
    let ws = Ws::with_patient();
    let v = json_measure(&ws, &["temperature", "--celsius", "38.0"]);
    let c = v["result"]["value"].as_f64().unwrap();
    assert!((c - 38.0).abs() <= 0.5, "{c}");
    let store = RecordStore::open(ws.store()).unwrap();
    let id = v["record_id"].as_str().unwrap();
    assert_eq!(store.index().record(id).unwrap().payload.value(), Some(c));
}

#[test]
fn blood_pressure_default_patient() {
    let ws = Ws::with_patient();
    let v = json_measure(&ws, &["blood-pressure"]);
    let r = &v["result"];
    assert!((r["systolic"].as_f64().unwrap() - 117.7).abs() <= 2.0);
    assert!((r["diastolic"].as_f64().unwrap() - 87.3).abs() <= 2.0);
    assert!((r["heart_rate"].as_f64().unwrap() - 72.0).abs() <= 2.0);
}

#[test]
fn blood_pressure_over_lossy_bluetooth() {
    let ws = Ws::with_patient();
    let v = json_measure(&ws, &["blood-pressure", "--transport", "bluetooth", "--drop-prob", "0.05", "--seed", "9"]);
    assert!((v["result"]["systolic"].as_f64().unwrap() - 117.7).abs() <= 3.0);
    assert!((v["result"]["diastolic"].as_f64().unwrap() - 87.3).abs() <= 3.0);
}

#[test]
fn safety_cutoff_refuses() {
    let ws = Ws::with_patient();
    let out = ws.run(&["measure", "blood-pressure", "--patient", "p1", "--safety-off"]);
    assert_eq!(error_code(&out), "hub-refused");
    assert!(out.stdout.is_empty());
    assert_eq!(RecordStore::open(ws.store()).unwrap().index().record_count(), 0);
}

#[test]
fn advice_fires_on_fever() {
    let ws = Ws::with_patient();
    let v = json_measure(&ws, &["temperature", "--celsius", "39.5"]);
    assert_eq!(v["advice"][0]["id"], "fever");
    let out = ws.ok(&["measure", "temperature", "--patient", "p1", "--celsius", "36.8"]);
    assert!(!out.contains("advice"));
}

#[test]
fn hearing_and_audiogram_show() {
    let ws = Ws::with_patient();
    let v = json_measure(&ws, &["hearing", "--params", r#"{"profile":{"250":22,"1000":40,"4000":95}}"#]);
    let rows = v["result"].as_array().unwrap();
    let db = |hz: u64| rows.iter().find(|r| r["hz"] == hz).unwrap()["db"].clone();
    assert_eq!(db(250), 25);
    assert_eq!(db(1000), 40);
    assert_eq!(db(4000), Value::Null);
    assert_eq!(db(500), Value::Null);
    let text = ws.ok(&["audiogram", "show", v["record_id"].as_str().unwrap()]);
    assert!(text.contains("1000") && text.contains("NR"));
    assert_eq!(error_code(&ws.run(&["audiogram", "show", "nope"])), "UnknownRecord");
}

#[test]
fn eye_power_and_height() {
    let ws = Ws::with_patient();
    let v = json_measure(&ws, &["eye-power", "--distance-m", "0.075"]);
    assert!((v["result"]["value"].as_f64().unwrap() - 17.5).abs() < 0.05);
    let params = r#"{"ruler_top":{"x":0,"y":0},"ruler_bottom":{"x":0,"y":400},"head":{"x":50,"y":10},"foot":{"x":50,"y":690},"ruler_len":1}"#;
    let v = json_measure(&ws, &["height", "--params", params]);
    assert!((v["result"]["value"].as_f64().unwrap() - 1.7).abs() < 1e-9);
    assert_eq!(error_code(&ws.run(&["measure", "height", "--patient", "p1"])), "invalid-params");
}

#[test]
fn failures_print_one_error_line() {
    let ws = Ws::with_patient();
    assert_eq!(error_code(&ws.run(&["measure", "temperature", "--patient", "ghost"])), "UnknownPatient");
    assert_eq!(error_code(&ws.run(&["measure", "sonar", "--patient", "p1"])), "usage");
    assert_eq!(error_code(&ws.run(&["frobnicate"])), "usage");
    assert_eq!(error_code(&ws.run(&["measure", "weight", "--patient", "p1", "--drop-prob", "2"])), "invalid-params");
    assert_eq!(error_code(&ws.run(&["measure", "weight", "--patient", "p1", "--params", "[1]"])), "invalid-params");
    assert_eq!(error_code(&ws.run(&["sync", "run"])), "NoEndpoint");
    assert_eq!(error_code(&ws.run(&["scenario", "run", "/no/such/file"])), "Io");
    assert!(bin().arg("--help").output().unwrap().status.success());
}

#[test]
fn session_lock_is_shared() {
    let ws = Ws::with_patient();
    let lock = SessionLock::acquire(SessionLock::path_for(&ws.store())).unwrap();
    assert_eq!(error_code(&ws.run(&["measure", "weight", "--patient", "p1"])), "session-busy");
    drop(lock);
    ws.ok(&["measure", "weight", "--patient", "p1"]);
}

#[test]
fn weight_screening() {
    let ws = Ws::with_patient();
    for kg in ["70", "68.5", "67", "65.5"] {
        ws.ok(&["measure", "weight", "--patient", "p1", "--kg", kg]);
    }
    let flag: Value = serde_json::from_str(ws.ok(&["screen", "weight", "p1"]).trim()).unwrap();
    assert_eq!(flag["rule"], "weight_decline");
    assert_eq!(flag["evidence"].as_array().unwrap().len(), 4);
    let region: Value = serde_json::from_str(ws.ok(&["screen", "region", "north"]).trim()).unwrap();
    assert_eq!(region["flagged"], 1);
}

#[test]
fn sync_run_uploads_once() {
    let ws = Ws::with_patient();
    ws.ok(&["measure", "weight", "--patient", "p1"]);
    ws.ok(&["measure", "temperature", "--patient", "p1"]);
    let server = SyncServer::bind("127.0.0.1:0", ServerStore::in_memory()).unwrap();
    let endpoint = server.local_addr().to_string();
    let first: Value = serde_json::from_str(ws.ok(&["sync", "run", "--endpoint", &endpoint]).trim()).unwrap();
    assert_eq!(first["uploaded"], 2);
    let out = bin().arg("--store").arg(ws.store()).args(["sync", "run"]).env("UMPHCS_SYNC_ENDPOINT", &endpoint).output().unwrap();
    let second: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((second["uploaded"].as_u64(), second["skipped"].as_u64()), (Some(0), Some(2)));
    server.shutdown();
}

#[test]
fn empty_scenario_exits_zero() {
    let ws = Ws::new();
    let file = ws.dir.path().join("empty.jsonl");
    std::fs::write(&file, "# nothing scheduled\n").unwrap();
    let out = ws.ok(&["scenario", "run", file.to_str().unwrap()]);
    assert_eq!(out, "{\"type\":\"summary\",\"name\":\"\",\"tests\":0,\"passed\":0,\"failed\":0}\n");
}

#[test]
fn six_test_scenario() {
    let ws = Ws::new();
    let out = ws.ok(&["scenario", "run", data("clinic_day.jsonl").to_str().unwrap()]);
    let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[..6].iter().all(|l| l["status"] == "pass"));
    assert_eq!(RecordStore::open(ws.store()).unwrap().index().record_count(), 6);
}

#[test]
fn lossy_scenario() {
    let ws = Ws::new();
    let out = ws.ok(&["scenario", "run", data("lossy_bluetooth.jsonl").to_str().unwrap()]);
    assert!(out.ends_with("\"tests\":3,\"passed\":3,\"failed\":0}\n"));
}

#[test]
fn failing_scenario_exits_nonzero() {
    let ws = Ws::new();
    let file = ws.dir.path().join("bad.jsonl");
    std::fs::write(
        &file,
        "{\"type\":\"patient\",\"patient_id\":\"p\",\"name\":\"n\",\"region\":\"r\"}\n\
         {\"type\":\"test\",\"patient\":\"p\",\"kind\":\"weight\",\"params\":{\"kg\":50},\"expect\":{\"kg\":{\"value\":80,\"tol\":1}}}\n",
    )
    .unwrap();
    let out = ws.run(&["scenario", "run", file.to_str().unwrap()]);
    assert_eq!(error_code(&out), "scenario-failed");
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    std::fs::write(&file, "{\"type\":\"test\",\"patient\":\"nobody\"}\n").unwrap();
    assert_eq!(error_code(&ws.run(&["scenario", "run", file.to_str().unwrap()])), "ScenarioParseError");
}

#[test]
fn scenario_replay_is_byte_identical() {
    let a = Ws::new();
    let b = Ws::new();
    let file = data("lossy_bluetooth.jsonl");
    let ra = a.ok(&["scenario", "run", file.to_str().unwrap()]);
    let rb = b.ok(&["scenario", "run", file.to_str().unwrap()]);
    assert_eq!(ra, rb);
    assert_eq!(std::fs::read(a.store()).unwrap(), std::fs::read(b.store()).unwrap());
}
