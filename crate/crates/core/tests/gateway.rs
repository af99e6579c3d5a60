use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use umphcs::biosim::{CuffRunParams, HearingProfile};
use umphcs::diagnostics::SWEEP_FREQUENCIES;
use umphcs::gateway::{GatewayConfig, GatewayHandle};
use umphcs::records::{to_canonical, RecordStore, TestKind};
use umphcs::session::{run_hearing, run_test, RunOptions, SessionLock, TestSpec, DEFAULT_HEARING_TIMEOUT_S};

fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(60))).unwrap();
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: test\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
        payload.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    let status: u16 = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = if body.is_empty() { Value::Null } else { serde_json::from_str(body).unwrap_or_else(|_| panic!("{body}")) };
    (status, body)
}

struct Sse {
    reader: BufReader<TcpStream>,
}

impl Sse {
    fn open(addr: SocketAddr) -> Self {
        let mut s = TcpStream::connect(addr).unwrap();
        write!(s, "GET /session/stream HTTP/1.1\r\nHost: test\r\nAccept: text/event-stream\r\n\r\n").unwrap();
        s.set_read_timeout(Some(Duration::from_millis(200))).unwrap();
        let mut reader = BufReader::new(s);
        let mut line = String::new();
        // Skip the response head.
        loop {
            line.clear();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" {
                break;
            }
        }
        Sse { reader }
    }

    /// Events seen before `until`, as (name, data).
    fn collect(&mut self, until: Instant) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        let mut name = String::new();
        let mut line = String::new();
        while Instant::now() < until {
            line.clear();
            match self.reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {}
                Err(_) => continue,
            }
            // Chunked framing lines carry no colon-prefixed field; skip them.
            let l = line.trim_end();
            if let Some(n) = l.strip_prefix("event: ") {
                name = n.to_owned();
            } else if let Some(d) = l.strip_prefix("data: ") {
                out.push((std::mem::take(&mut name), serde_json::from_str(d).unwrap()));
            }
        }
        out
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    store: std::path::PathBuf,
    gw: GatewayHandle,
}

fn gateway(speed: f64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    {
        let mut s = RecordStore::open(&store).unwrap();
        s.add_patient("p1", "Asha", "north").unwrap();
    }
    let cfg = GatewayConfig { speed, ..GatewayConfig::new(&store) };
    let gw = GatewayHandle::spawn("127.0.0.1:0", cfg).unwrap();
    Fixture { _dir: dir, store, gw }
}

fn wait_done(addr: SocketAddr) -> Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let (status, v) = http(addr, "GET", "/session/result", None);
        assert_eq!(status, 200);
        if v["state"] != "running" || Instant::now() > deadline {
            return v;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn patients_and_single_reading() {
    let fx = gateway(100.0);
    let addr = fx.gw.local_addr();
    let (status, v) = http(addr, "GET", "/patients", None);
    assert_eq!(status, 200);
    assert_eq!(v[0]["patient_id"], "p1");

    let (status, v) = http(addr, "GET", "/session/result", None);
    assert_eq!(status, 409);
    assert_eq!(v["error"]["code"], "no-session");

    let (status, v) = http(addr, "POST", "/session/start", Some(&json!({"patient": "p1", "test": "temperature", "params": {"celsius": 38.6}})));
    assert_eq!(status, 200, "{v}");
    assert_eq!(v["state"], "done");
    assert!((v["result"]["value"].as_f64().unwrap() - 38.6).abs() <= 0.5);
    assert_eq!(v["advice"][0]["id"], "fever");
    let (_, again) = http(addr, "GET", "/session/result", None);
    assert_eq!(again, v);

    let (status, v) = http(addr, "POST", "/session/start", Some(&json!({"patient": "ghost", "test": "weight", "params": {"kg": 60}})));
    assert_eq!((status, v["error"]["code"].as_str()), (404, Some("UnknownPatient")));
    let (status, _) = http(addr, "POST", "/session/start", Some(&json!({"patient": "p1", "test": "weight"})));
    assert_eq!(status, 400);
    let (status, _) = http(addr, "POST", "/session/start", Some(&json!({"patient": "p1"})));
    assert_eq!(status, 400);

    let (status, v) = http(addr, "POST", "/session/start", Some(&json!({"patient": "p1", "test": "height", "params": {
        "ruler_top": {"x": 100, "y": 200}, "ruler_bottom": {"x": 100, "y": 400},
        "head": {"x": 300, "y": 50}, "foot": {"x": 300, "y": 650}, "ruler_len": 0.5}})));
    assert_eq!(status, 200);
    assert_eq!(v["result"]["value"], 1.5);

    drop(fx.gw);
    let store = RecordStore::open(&fx.store).unwrap();
    assert_eq!(store.history("p1", None).unwrap().len(), 2);
}

#[test]
fn requests_without_session_conflict() {
    let fx = gateway(100.0);
    let addr = fx.gw.local_addr();
    for (path, body) in [
        ("/session/hearing/event", Some(json!({"heard": true}))),
        ("/session/pot", Some(json!({"code": 10}))),
        ("/session/stop", None),
    ] {
        let (status, v) = http(addr, "POST", path, body.as_ref());
        assert_eq!(status, 409, "{path}");
        assert_eq!(v["error"]["code"], "no-session");
    }
}

#[test]
fn hearing_session_matches_simulated_patient() {
    let fx = gateway(1.0);
    let addr = fx.gw.local_addr();
    let mut sse = Sse::open(addr);
    let (status, mut v) = http(addr, "POST", "/session/start", Some(&json!({"patient": "p1", "test": "hearing"})));
    assert_eq!(status, 200);
    // Click "heard" exactly when the tone is at or above 30 dB.
    let mut clicks = 0;
    while v["state"] == "running" {
        let level = v["tone"]["level_db"].as_i64().unwrap();
        let (status, next) = http(addr, "POST", "/session/hearing/event", Some(&json!({"heard": level >= 30})));
        assert_eq!(status, 200);
        v = next;
        clicks += 1;
    }
    assert_eq!(v["state"], "done", "{v}");
    let oracle = run_hearing(&HearingProfile::flat(30.0, &SWEEP_FREQUENCIES), DEFAULT_HEARING_TIMEOUT_S).unwrap();
    assert_eq!(v["result"], serde_json::to_value(&oracle.audiogram).unwrap());
    assert_eq!(clicks, oracle.steps);

    let tones = sse.collect(Instant::now() + Duration::from_millis(300));
    assert!(tones.iter().filter(|(n, _)| n == "tone").count() >= clicks, "{}", tones.len());
    assert_eq!(tones.first().unwrap().1, json!({"freq_hz": 250, "level_db": -5, "state": "presenting"}));
    assert_eq!(tones.last().unwrap().0, "result");

    let (status, _) = http(addr, "POST", "/session/hearing/event", Some(&json!({"heard": true})));
    assert_eq!(status, 409);
}

#[test]
fn hearing_timeouts_advance_without_clicks() {
    let fx = gateway(2000.0);
    let addr = fx.gw.local_addr();
    let (status, _) = http(addr, "POST", "/session/start", Some(&json!({"patient": "p1", "test": "hearing"})));
    assert_eq!(status, 200);
    let v = wait_done(addr);
    assert_eq!(v["state"], "done");
    let entries = v["result"].as_array().unwrap();
    assert_eq!(entries.len(), SWEEP_FREQUENCIES.len());
    assert!(entries.iter().all(|e| e["db"].is_null()));
}

#[test]
fn eye_power_slider() {
    let fx = gateway(100.0);
    let addr = fx.gw.local_addr();
    http(addr, "POST", "/session/start", Some(&json!({"patient": "p1", "test": "eye_power"})));
    let (status, v) = http(addr, "POST", "/session/stop", None);
    assert_eq!((status, v["error"]["code"].as_str()), (409, Some("no-reading")));
    let (_, v) = http(addr, "POST", "/session/pot", Some(&json!({"code": 0})));
    assert!((v["diopters"].as_f64().unwrap() + 1.3).abs() < 1e-9);
    let (_, v) = http(addr, "POST", "/session/pot", Some(&json!({"code": 1023})));
    assert!((v["diopters"].as_f64().unwrap() - 17.5).abs() < 1e-9);
    let (status, _) = http(addr, "POST", "/session/pot", Some(&json!({"code": 1024})));
    assert_eq!(status, 400);
    let (status, v) = http(addr, "POST", "/session/stop", None);
    assert_eq!(status, 200);
    assert_eq!(v["state"], "done");
    assert_eq!(v["result"], json!({"value": 17.5, "unit": "D"}));
}

#[test]
fn blood_pressure_matches_direct_run() {
    let fx = gateway(500.0);
    let addr = fx.gw.local_addr();
    let (status, v) = http(addr, "POST", "/session/start", Some(&json!({"patient": "p1", "test": "blood_pressure"})));
    assert_eq!(status, 200);
    assert_eq!(v["state"], "running");
    let v = wait_done(addr);
    let direct = run_test(&TestSpec::BloodPressure { cuff: CuffRunParams::default(), analog_filter: false }, &RunOptions::default()).unwrap();
    let canonical: Value = serde_json::from_str(&to_canonical(&direct.payload().to_value())).unwrap();
    assert_eq!(v["result"], canonical);
    assert_eq!(v["record_id"], "gateway-000001");
}

#[test]
fn live_stream_rate_busy_and_stop() {
    let fx = gateway(1.0);
    let addr = fx.gw.local_addr();
    let mut sse = Sse::open(addr);
    let (status, _) = http(addr, "POST", "/session/start", Some(&json!({"patient": "p1", "test": "blood_pressure"})));
    assert_eq!(status, 200);

    let (status, v) = http(addr, "POST", "/session/start", Some(&json!({"patient": "p1", "test": "weight", "params": {"kg": 60}})));
    assert_eq!((status, v["error"]["code"].as_str()), (409, Some("session-busy")));
    // The CLI shares the same lock file.
    assert!(SessionLock::acquire(SessionLock::path_for(&fx.store)).is_err());

    let t0 = Instant::now();
    let events = sse.collect(t0 + Duration::from_millis(1500));
    let elapsed = t0.elapsed().as_secs_f64();
    let samples: Vec<&Value> = events.iter().filter(|(n, _)| n == "sample").map(|(_, d)| d).collect();
    assert!(samples.len() as f64 / elapsed >= 10.0, "{} events in {elapsed:.2} s", samples.len());
    let first = samples[0];
    assert!(first["t_s"].is_number() && first["cuff_mmHg"].as_f64().unwrap() > 150.0 && first["ow"].is_number());

    let (status, v) = http(addr, "POST", "/session/stop", None);
    assert_eq!(status, 200);
    assert_eq!(v["state"], "error");
    assert!(v["error"]["code"].is_string());
    assert!(SessionLock::acquire(SessionLock::path_for(&fx.store)).is_ok());
    let store = RecordStore::open(&fx.store).unwrap();
    assert!(store.history("p1", Some(TestKind::BloodPressure)).unwrap().is_empty());
}
