//! Patients, test records and the append-only local store.

pub mod canonical;
mod screening;
pub(crate) mod store;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::diagnostics::{Audiogram, BpResult};

pub use canonical::{format_number, to_canonical, CanonicalFormatter};
pub use screening::{screen_region, screen_weight, RegionalAlert, ScreeningConfig, TrendFlag, TrendRule, WeightPoint, WeightSource};
pub use store::{Clock, FixedStepClock, LogIndex, RecordStore, SystemClock};

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("unknown patient {0}")]
    UnknownPatient(String),
    #[error("record {0} already stored with different content")]
    Conflict(String),
    #[error("payload does not match test kind {0}")]
    PayloadMismatch(TestKind),
    #[error("identifier must be non-empty and free of whitespace: {0:?}")]
    BadId(String),
}

impl RecordsError {
    pub fn code(&self) -> &'static str {
        match self {
            RecordsError::Io(_) => "Io",
            RecordsError::Corrupt { .. } => "CorruptStore",
            RecordsError::Malformed(_) => "MalformedLine",
            RecordsError::UnknownPatient(_) => "UnknownPatient",
            RecordsError::Conflict(_) => "RecordConflict",
            RecordsError::PayloadMismatch(_) => "PayloadMismatch",
            RecordsError::BadId(_) => "BadId",
        }
    }
}

fn check_id(id: &str) -> Result<(), RecordsError> {
    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(RecordsError::BadId(id.to_owned()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Temperature,
    BloodPressure,
    Weight,
    EyePower,
    Hearing,
    Height,
}

impl TestKind {
    pub const ALL: [TestKind; 6] = [
        TestKind::Temperature,
        TestKind::BloodPressure,
        TestKind::Weight,
        TestKind::EyePower,
        TestKind::Hearing,
        TestKind::Height,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TestKind::Temperature => "temperature",
            TestKind::BloodPressure => "blood_pressure",
            TestKind::Weight => "weight",
            TestKind::EyePower => "eye_power",
            TestKind::Hearing => "hearing",
            TestKind::Height => "height",
        }
    }

    /// Unit of the scalar payload, for kinds that have one.
    pub fn unit(&self) -> Option<&'static str> {
        match self {
            TestKind::Temperature => Some("degC"),
            TestKind::Weight => Some("kg"),
            TestKind::EyePower => Some("D"),
            TestKind::Height => Some("m"),
            TestKind::BloodPressure | TestKind::Hearing => None,
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        TestKind::ALL.into_iter().find(|k| k.as_str() == norm).ok_or_else(|| format!("unknown test kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    pub name: String,
    pub region: String,
    #[serde(with = "canonical::timestamp")]
    pub created_at: DateTime<Utc>,
}

impl Patient {
    pub fn new(patient_id: impl Into<String>, name: impl Into<String>, region: impl Into<String>, created_at: DateTime<Utc>) -> Self {
        Patient { patient_id: patient_id.into(), name: name.into(), region: region.into(), created_at }
    }

    pub fn to_line(&self) -> String {
        let mut obj = Map::new();
        obj.insert("type".into(), "patient".into());
        if let Value::Object(fields) = serde_json::to_value(self).expect("patient serializes") {
            obj.extend(fields);
        }
        to_canonical(&obj)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Scalar { value: f64, unit: &'static str },
    BloodPressure(BpResult),
    Hearing(Audiogram),
}

impl Payload {
    pub fn scalar(kind: TestKind, value: f64) -> Result<Payload, RecordsError> {
        kind.unit().map(|unit| Payload::Scalar { value, unit }).ok_or(RecordsError::PayloadMismatch(kind))
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Payload::Scalar { value, .. } => Some(*value),
            _ => None,
        }
    }

    fn fits(&self, kind: TestKind) -> bool {
        match (self, kind) {
            (Payload::Scalar { unit, .. }, k) => k.unit() == Some(*unit),
            (Payload::BloodPressure(_), TestKind::BloodPressure) => true,
            (Payload::Hearing(_), TestKind::Hearing) => true,
            _ => false,
        }
    }

    pub fn to_value(&self) -> Value {
        match self {
            Payload::Scalar { value, unit } => serde_json::json!({ "value": value, "unit": unit }),
            Payload::BloodPressure(bp) => serde_json::to_value(bp).expect("bp serializes"),
            Payload::Hearing(gram) => serde_json::to_value(gram).expect("audiogram serializes"),
        }
    }

    fn from_value(kind: TestKind, v: Value) -> Result<Payload, String> {
        match kind {
            TestKind::BloodPressure => serde_json::from_value(v).map(Payload::BloodPressure).map_err(|e| e.to_string()),
            TestKind::Hearing => serde_json::from_value(v).map(Payload::Hearing).map_err(|e| e.to_string()),
            _ => {
                #[derive(Deserialize)]
                struct Raw {
                    value: f64,
                    unit: String,
                }
                let raw: Raw = serde_json::from_value(v).map_err(|e| e.to_string())?;
                let unit = kind.unit().expect("scalar kind");
                if raw.unit != unit {
                    return Err(format!("unit {:?} does not match {kind}", raw.unit));
                }
                Ok(Payload::Scalar { value: raw.value, unit })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestRecord {
    pub record_id: String,
    pub patient_id: String,
    pub device_id: String,
    pub taken_at: DateTime<Utc>,
    pub kind: TestKind,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    kind: TestKind,
    record_id: String,
    patient_id: String,
    device_id: String,
    #[serde(with = "canonical::timestamp")]
    taken_at: DateTime<Utc>,
    payload: Value,
}

impl TestRecord {
    pub fn new(
        record_id: impl Into<String>,
        patient_id: impl Into<String>,
        device_id: impl Into<String>,
        taken_at: DateTime<Utc>,
        kind: TestKind,
        payload: Payload,
    ) -> Result<Self, RecordsError> {
        if !payload.fits(kind) {
            return Err(RecordsError::PayloadMismatch(kind));
        }
        Ok(TestRecord {
            record_id: record_id.into(),
            patient_id: patient_id.into(),
            device_id: device_id.into(),
            taken_at,
            kind,
            payload,
        })
    }

    pub fn to_line(&self) -> String {
        let wire = RecordWire {
            kind: self.kind,
            record_id: self.record_id.clone(),
            patient_id: self.patient_id.clone(),
            device_id: self.device_id.clone(),
            taken_at: self.taken_at,
            payload: self.payload.to_value(),
        };
        let mut obj = Map::new();
        obj.insert("type".into(), "record".into());
        if let Value::Object(fields) = serde_json::to_value(&wire).expect("record serializes") {
            obj.extend(fields);
        }
        to_canonical(&obj)
    }
}

/// One line of a store log.
#[derive(Debug, Clone, PartialEq)]
pub enum LogLine {
    Patient(Patient),
    Record(TestRecord),
    /// The local copy of a patient or record reached the server.
    Synced { target: SyncTarget },
    /// Server side: a later upload replaced this record id.
    Supersede { record_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SyncTarget {
    Patient(String),
    Record(String),
}

impl LogLine {
    pub fn to_line(&self) -> String {
        match self {
            LogLine::Patient(p) => p.to_line(),
            LogLine::Record(r) => r.to_line(),
            LogLine::Synced { target: SyncTarget::Patient(id) } => {
                to_canonical(&serde_json::json!({ "type": "synced", "patient_id": id }))
            }
            LogLine::Synced { target: SyncTarget::Record(id) } => {
                to_canonical(&serde_json::json!({ "type": "synced", "record_id": id }))
            }
            LogLine::Supersede { record_id } => to_canonical(&serde_json::json!({ "type": "supersede", "record_id": record_id })),
        }
    }

    pub fn parse(line: &str) -> Result<LogLine, RecordsError> {
        let bad = |why: String| RecordsError::Malformed(why);
        let mut v: Map<String, Value> = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let kind = match v.remove("type") {
            Some(Value::String(s)) => s,
            _ => return Err(bad("missing type".into())),
        };
        let id_field = |v: &Map<String, Value>, key: &str| -> Option<String> { v.get(key).and_then(Value::as_str).map(str::to_owned) };
        let parsed = match kind.as_str() {
            "patient" => LogLine::Patient(serde_json::from_value(Value::Object(v)).map_err(|e| bad(e.to_string()))?),
            "record" => {
                let wire: RecordWire = serde_json::from_value(Value::Object(v)).map_err(|e| bad(e.to_string()))?;
                let payload = Payload::from_value(wire.kind, wire.payload).map_err(bad)?;
                LogLine::Record(TestRecord {
                    record_id: wire.record_id,
                    patient_id: wire.patient_id,
                    device_id: wire.device_id,
                    taken_at: wire.taken_at,
                    kind: wire.kind,
                    payload,
                })
            }
            "synced" => match (id_field(&v, "patient_id"), id_field(&v, "record_id")) {
                (Some(p), None) => LogLine::Synced { target: SyncTarget::Patient(p) },
                (None, Some(r)) => LogLine::Synced { target: SyncTarget::Record(r) },
                _ => return Err(bad("synced marker needs exactly one id".into())),
            },
            "supersede" => LogLine::Supersede { record_id: id_field(&v, "record_id").ok_or_else(|| bad("missing record_id".into()))? },
            other => return Err(bad(format!("unknown line type {other:?}"))),
        };
        Ok(parsed)
    }
}
