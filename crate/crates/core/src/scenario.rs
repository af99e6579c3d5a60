//! Scripted sessions: a JSON-lines file naming patients and the tests to
//! run on them, replayed deterministically into a store and a report.
//!
//! The file format is described in `docs/scenario.md`.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::advice::{Advice, AdviceRules};
use crate::records::canonical::timestamp;
use crate::records::{to_canonical, FixedStepClock, Patient, RecordStore, RecordsError, ScreeningConfig, TestKind};
use crate::session::{run_test, RunOptions, TestSpec};
use crate::wireproto::{FaultProfile, LinkConfig, LinkKind};

#[derive(Debug, Error, PartialEq)]
#[error("scenario line {line}, column {column}: {message}")]
pub struct ScenarioParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Parse(#[from] ScenarioParseError),
    #[error(transparent)]
    Records(#[from] RecordsError),
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::Parse(_) => "ScenarioParseError",
            ScenarioError::Records(e) => e.code(),
            ScenarioError::Io(_) => "Io",
        }
    }
}

/// Fault profile as written in a scenario; a missing seed is derived from
/// the scenario seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default)]
    pub drop_prob: f64,
    #[serde(default)]
    pub corrupt_prob: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_device")]
    pub device_id: String,
    #[serde(default = "default_epoch", with = "timestamp")]
    pub epoch: DateTime<Utc>,
    #[serde(default = "default_transport")]
    pub transport: LinkKind,
    #[serde(default)]
    pub faults: Option<FaultSpec>,
    #[serde(default)]
    pub hearing_timeout_s: Option<f64>,
}

fn default_device() -> String {
    "scenario".into()
}

fn default_epoch() -> DateTime<Utc> {
    DateTime::from_timestamp(946_684_800, 0).expect("valid epoch")
}

fn default_transport() -> LinkKind {
    LinkKind::Wired
}

impl Default for Header {
    fn default() -> Self {
        Header {
            name: String::new(),
            seed: 0,
            device_id: default_device(),
            epoch: default_epoch(),
            transport: default_transport(),
            faults: None,
            hearing_timeout_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioPatient {
    pub patient_id: String,
    pub name: String,
    pub region: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerance {
    pub value: f64,
    pub tol: f64,
}

/// Either a failure code the test must end with, or bounds on its fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Expect {
    pub error: Option<String>,
    pub fields: BTreeMap<String, Tolerance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledTest {
    /// 1-based line in the scenario file.
    pub line: usize,
    pub patient: String,
    pub spec: TestSpec,
    pub transport: LinkKind,
    pub faults: Option<FaultProfile>,
    pub safety_off: bool,
    pub expect: Option<Expect>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub header: Header,
    pub patients: Vec<ScenarioPatient>,
    pub tests: Vec<ScheduledTest>,
}

// Per-test seeds are spread out so neighbouring tests do not share streams.
fn derived_seed(seed: u64, index: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_add(salt).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioParseError> {
        let mut sc = Scenario::default();
        let mut seen_header = false;
        let mut seen_content = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |column: usize, message: String| ScenarioParseError { line, column, message };
            let at = |e: serde_json::Error| {
                let column = if e.line() == 0 { 1 } else { e.column() };
                err(column, strip_position(&e))
            };
            let value: Value = serde_json::from_str(raw).map_err(at)?;
            let Value::Object(mut obj) = value else {
                return Err(err(1, "expected a JSON object".into()));
            };
            let kind = match obj.remove("type") {
                Some(Value::String(s)) => s,
                _ => return Err(err(1, "missing \"type\"".into())),
            };
            match kind.as_str() {
                "scenario" => {
                    if seen_header || seen_content {
                        return Err(err(1, "the scenario header must come first and only once".into()));
                    }
                    sc.header = serde_json::from_value(Value::Object(obj)).map_err(at)?;
                    seen_header = true;
                }
                "patient" => {
                    let p: ScenarioPatient = serde_json::from_value(Value::Object(obj)).map_err(at)?;
                    if sc.patients.iter().any(|q| q.patient_id == p.patient_id) {
                        return Err(err(1, format!("patient {:?} defined twice", p.patient_id)));
                    }
                    sc.patients.push(p);
                }
                "test" => {
                    let t = sc.parse_test(line, obj).map_err(|m| err(1, m))?;
                    sc.tests.push(t);
                }
                other => return Err(err(1, format!("unknown line type {other:?}"))),
            }
            seen_content = true;
        }
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Ok(Self::parse(&std::fs::read_to_string(path)?)?)
    }

    fn parse_test(&self, line: usize, mut obj: Map<String, Value>) -> Result<ScheduledTest, String> {
        let index = self.tests.len();
        let patient = match obj.remove("patient") {
            Some(Value::String(s)) => s,
            _ => return Err("test needs a \"patient\"".into()),
        };
        if !self.patients.iter().any(|p| p.patient_id == patient) {
            return Err(format!("test references undefined patient {patient:?}"));
        }
        let kind = obj.remove("kind").ok_or("test needs a \"kind\"")?;
        let mut params = obj.remove("params").unwrap_or_else(|| Value::Object(Map::new()));
        let kind_name = kind.as_str().unwrap_or_default();
        if kind_name == "blood_pressure" {
            if let Value::Object(p) = &mut params {
                p.entry("seed").or_insert_with(|| derived_seed(self.header.seed, index, 1).into());
            }
        }
        if kind_name == "hearing" {
            if let (Value::Object(p), Some(t)) = (&mut params, self.header.hearing_timeout_s) {
                p.entry("timeout_s").or_insert_with(|| t.into());
            }
        }
        let spec: TestSpec = serde_json::from_value(serde_json::json!({ "kind": kind, "params": params }))
            .map_err(|e| format!("test parameters: {}", strip_position(&e)))?;

        let transport = match obj.remove("transport") {
            Some(v) => serde_json::from_value(v).map_err(|e| format!("transport: {}", strip_position(&e)))?,
            None => self.header.transport,
        };
        let faults = match obj.remove("faults") {
            Some(v) => Some(serde_json::from_value::<FaultSpec>(v).map_err(|e| format!("faults: {}", strip_position(&e)))?),
            None => self.header.faults.clone(),
        };
        let faults = faults.map(|f| FaultProfile {
            drop_prob: f.drop_prob,
            corrupt_prob: f.corrupt_prob,
            seed: f.seed.unwrap_or_else(|| derived_seed(self.header.seed, index, 2)),
            latency_ms: f.latency_ms,
        });
        if let Some(f) = &faults {
            f.validate().map_err(|e| format!("faults: {e}"))?;
        }
        let safety_off = match obj.remove("safety_off") {
            Some(Value::Bool(b)) => b,
            None => false,
            Some(_) => return Err("\"safety_off\" must be a boolean".into()),
        };
        let expect = obj.remove("expect").map(parse_expect).transpose()?;
        if let Some(extra) = obj.keys().next() {
            return Err(format!("unknown test field {extra:?}"));
        }
        Ok(ScheduledTest { line, patient, spec, transport, faults, safety_off, expect })
    }

    /// Open (or create) a store whose timestamps start at the scenario
    /// epoch and advance one second per use.
    pub fn open_store(&self, path: impl AsRef<Path>) -> Result<RecordStore, RecordsError> {
        RecordStore::open_with_clock(path, Box::new(FixedStepClock::new(self.header.epoch, Duration::seconds(1))))
    }
}

fn parse_expect(v: Value) -> Result<Expect, String> {
    let Value::Object(obj) = v else {
        return Err("\"expect\" must be an object".into());
    };
    let mut out = Expect::default();
    for (k, v) in obj {
        if k == "error" {
            out.error = Some(v.as_str().ok_or("expected error must be a string")?.to_owned());
        } else {
            let t: Tolerance = serde_json::from_value(v).map_err(|e| format!("expect.{k}: {}", strip_position(&e)))?;
            out.fields.insert(k, t);
        }
    }
    if out.error.is_some() && !out.fields.is_empty() {
        return Err("expect either an error or field values, not both".into());
    }
    Ok(out)
}

// serde_json appends " at line L column C"; the caller reports its own.
fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_owned(),
        None => s,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub field: String,
    pub value: Option<f64>,
    pub expected: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorInfo {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    #[serde(rename = "type")]
    pub line_type: &'static str,
    pub index: usize,
    pub line: usize,
    pub patient: String,
    pub kind: TestKind,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub advice: Vec<Advice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    #[serde(rename = "type")]
    pub line_type: &'static str,
    pub name: String,
    pub tests: usize,
    pub passed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub tests: Vec<TestReport>,
    pub summary: Summary,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.summary.failed == 0
    }

    /// One canonical JSON line per test, then the summary line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tests {
            out.push_str(&to_canonical(t));
            out.push('\n');
        }
        out.push_str(&to_canonical(&self.summary));
        out.push('\n');
        out
    }
}

/// Register the patients, then run every test in file order, saving each
/// successful measurement to `store`.
pub fn run_scenario(sc: &Scenario, store: &mut RecordStore, rules: &AdviceRules) -> Result<Report, ScenarioError> {
    for p in &sc.patients {
        let created_at = store.now();
        store.save_patient(&Patient {
            patient_id: p.patient_id.clone(),
            name: p.name.clone(),
            region: p.region.clone(),
            created_at,
        })?;
    }
    let screening = ScreeningConfig::default();
    let mut tests = Vec::with_capacity(sc.tests.len());
    for (index, t) in sc.tests.iter().enumerate() {
        let mut link = LinkConfig::for_kind(t.transport);
        if let Some(f) = &t.faults {
            link = link.with_faults(f.clone());
        }
        let opts = RunOptions { link, safety_off: t.safety_off, ..RunOptions::default() };
        let mut rep = TestReport {
            line_type: "test",
            index,
            line: t.line,
            patient: t.patient.clone(),
            kind: t.spec.kind(),
            status: Status::Pass,
            record_id: None,
            summary: None,
            fields: BTreeMap::new(),
            checks: Vec::new(),
            advice: Vec::new(),
            error: None,
        };
        let expect = t.expect.clone().unwrap_or_default();
        match run_test(&t.spec, &opts) {
            Ok(m) => {
                let record = store.record(&t.patient, &sc.header.device_id, m.kind(), m.payload())?;
                let fields = m.fields();
                let trend = store.screen_patient(&t.patient, &screening)?;
                rep.advice = rules.evaluate(m.kind(), &fields, trend.as_ref());
                rep.record_id = Some(record.record_id);
                rep.summary = Some(m.summary());
                rep.fields = fields.iter().cloned().collect();
                for (field, tol) in &expect.fields {
                    let value = rep.fields.get(field).copied();
                    let pass = value.is_some_and(|v| (v - tol.value).abs() <= tol.tol);
                    rep.checks.push(Check { field: field.clone(), value, expected: tol.value, tol: tol.tol, pass });
                }
                if expect.error.is_some() || rep.checks.iter().any(|c| !c.pass) {
                    rep.status = Status::Fail;
                }
            }
            Err(e) => {
                let code = e.code();
                rep.status = if expect.error.as_deref() == Some(code) { Status::Pass } else { Status::Error };
                rep.error = Some(ErrorInfo { code: code.into(), message: e.to_string() });
            }
        }
        tests.push(rep);
    }
    let passed = tests.iter().filter(|t| t.status == Status::Pass).count();
    let summary = Summary { line_type: "summary", name: sc.header.name.clone(), tests: tests.len(), passed, failed: tests.len() - passed };
    Ok(Report { tests, summary })
}
