//! Append-only JSON-lines store and the in-memory index built from it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Duration, Utc};

use super::screening::{self, RegionalAlert, ScreeningConfig, TrendFlag, WeightPoint, WeightSource};
use super::{check_id, LogLine, Patient, Payload, RecordsError, SyncTarget, TestKind, TestRecord};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock: `start`, then `start + step`, and so on.
#[derive(Debug)]
pub struct FixedStepClock {
    start: DateTime<Utc>,
    step: Duration,
    ticks: AtomicU64,
}

impl FixedStepClock {
    pub fn new(start: DateTime<Utc>, step: Duration) -> Self {
        FixedStepClock { start, step, ticks: AtomicU64::new(0) }
    }
}

impl Clock for FixedStepClock {
    fn now(&self) -> DateTime<Utc> {
        let n = self.ticks.fetch_add(1, Ordering::Relaxed);
        self.start + self.step * i32::try_from(n).unwrap_or(i32::MAX)
    }
}

/// Patients, records and sync markers, keyed for lookup. Shared by the
/// local store and the sync server.
#[derive(Debug, Default, Clone)]
pub struct LogIndex {
    patients: BTreeMap<String, (Patient, String)>,
    records: BTreeMap<String, (TestRecord, String)>,
    by_patient: HashMap<String, BTreeSet<String>>,
    synced: BTreeSet<SyncTarget>,
    device_seq: HashMap<String, u64>,
}

impl LogIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn patient(&self, id: &str) -> Option<&Patient> {
        self.patients.get(id).map(|(p, _)| p)
    }

    pub fn patient_line(&self, id: &str) -> Option<&str> {
        self.patients.get(id).map(|(_, l)| l.as_str())
    }

    pub fn patients(&self) -> impl Iterator<Item = &Patient> {
        self.patients.values().map(|(p, _)| p)
    }

    pub fn record(&self, id: &str) -> Option<&TestRecord> {
        self.records.get(id).map(|(r, _)| r)
    }

    pub fn record_line(&self, id: &str) -> Option<&str> {
        self.records.get(id).map(|(_, l)| l.as_str())
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Records of a patient ordered by `taken_at`, then id.
    pub fn history(&self, patient_id: &str, kind: Option<TestKind>) -> Vec<&TestRecord> {
        let mut out: Vec<&TestRecord> = self
            .by_patient
            .get(patient_id)
            .into_iter()
            .flatten()
            .filter_map(|id| self.record(id))
            .filter(|r| kind.is_none_or(|k| r.kind == k))
            .collect();
        out.sort_by(|a, b| a.taken_at.cmp(&b.taken_at).then_with(|| a.record_id.cmp(&b.record_id)));
        out
    }

    pub fn is_synced(&self, target: &SyncTarget) -> bool {
        self.synced.contains(target)
    }

    pub fn insert_patient(&mut self, p: Patient, line: String) {
        self.patients.insert(p.patient_id.clone(), (p, line));
    }

    /// Insert or replace a record; returns the replaced one.
    pub fn insert_record(&mut self, r: TestRecord, line: String) -> Option<TestRecord> {
        if let Some(seq) = r.record_id.strip_prefix(&format!("{}-", r.device_id)).and_then(|s| s.parse::<u64>().ok()) {
            let e = self.device_seq.entry(r.device_id.clone()).or_default();
            *e = (*e).max(seq);
        }
        let old = self.records.insert(r.record_id.clone(), (r.clone(), line)).map(|(o, _)| o);
        if let Some(o) = &old {
            if let Some(set) = self.by_patient.get_mut(&o.patient_id) {
                set.remove(&o.record_id);
            }
        }
        self.by_patient.entry(r.patient_id).or_default().insert(r.record_id);
        old
    }

    pub fn mark_synced(&mut self, target: SyncTarget) {
        self.synced.insert(target);
    }

    /// Next sequential record id for a device.
    pub fn next_record_id(&self, device_id: &str) -> String {
        format!("{device_id}-{:06}", self.device_seq.get(device_id).copied().unwrap_or(0) + 1)
    }

    pub fn screen_patient(&self, patient_id: &str, cfg: &ScreeningConfig) -> Option<TrendFlag> {
        screening::screen_weight(patient_id, &self.weight_history(patient_id), cfg)
    }

    pub fn screen_region(&self, region: &str, cfg: &ScreeningConfig) -> Option<RegionalAlert> {
        screening::screen_region(self, region, cfg)
    }
}

impl WeightSource for LogIndex {
    fn patients_in_region(&self, region: &str) -> Vec<String> {
        self.patients().filter(|p| p.region == region).map(|p| p.patient_id.clone()).collect()
    }

    fn weight_history(&self, patient_id: &str) -> Vec<WeightPoint> {
        self.history(patient_id, Some(TestKind::Weight))
            .into_iter()
            .filter_map(|r| r.payload.value().map(|kg| WeightPoint { record_id: r.record_id.clone(), kg }))
            .collect()
    }
}

/// Open (creating if needed) a log file, drop a torn final line and parse
/// the rest.
pub(crate) fn load_log(path: &Path) -> Result<(File, Vec<(LogLine, String)>), RecordsError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        log::warn!("{}: discarding {} bytes of a partially written line", path.display(), bytes.len() - keep);
        file.set_len(keep as u64)?;
        file.seek(SeekFrom::End(0))?;
        bytes.truncate(keep);
    }
    let text = String::from_utf8(bytes).map_err(|e| RecordsError::Corrupt { line: 0, reason: e.to_string() })?;
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = LogLine::parse(raw).map_err(|e| RecordsError::Corrupt { line: i + 1, reason: e.to_string() })?;
        lines.push((parsed, raw.to_owned()));
    }
    Ok((file, lines))
}

/// Write one line and wait for it to reach the disk.
pub(crate) fn append_line(file: &mut File, line: &str) -> Result<(), RecordsError> {
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
    file.write_all(&buf)?;
    file.flush()?;
    file.sync_data()?;
    Ok(())
}

/// The operator's local store: one JSON object per line, never rewritten.
pub struct RecordStore {
    path: PathBuf,
    file: File,
    index: LogIndex,
    clock: Box<dyn Clock>,
}

impl std::fmt::Debug for RecordStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordStore").field("path", &self.path).field("records", &self.index.record_count()).finish()
    }
}

impl RecordStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RecordsError> {
        Self::open_with_clock(path, Box::new(SystemClock))
    }

    pub fn open_with_clock(path: impl AsRef<Path>, clock: Box<dyn Clock>) -> Result<Self, RecordsError> {
        let path = path.as_ref().to_path_buf();
        let (file, lines) = load_log(&path)?;
        let mut index = LogIndex::new();
        for (line, raw) in lines {
            match line {
                LogLine::Patient(p) => index.insert_patient(p, raw),
                LogLine::Record(r) => {
                    index.insert_record(r, raw);
                }
                LogLine::Synced { target } => index.mark_synced(target),
                LogLine::Supersede { .. } => {}
            }
        }
        Ok(RecordStore { path, file, index, clock })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn index(&self) -> &LogIndex {
        &self.index
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// Store a patient. Saving an identical patient again is a no-op.
    pub fn save_patient(&mut self, p: &Patient) -> Result<bool, RecordsError> {
        check_id(&p.patient_id)?;
        let line = p.to_line();
        match self.index.patient_line(&p.patient_id) {
            Some(existing) if existing == line => return Ok(false),
            Some(_) => return Err(RecordsError::Conflict(p.patient_id.clone())),
            None => {}
        }
        append_line(&mut self.file, &line)?;
        self.index.insert_patient(p.clone(), line);
        Ok(true)
    }

    /// Register a patient stamped with the store clock.
    pub fn add_patient(&mut self, id: &str, name: &str, region: &str) -> Result<Patient, RecordsError> {
        if let Some(p) = self.index.patient(id) {
            if p.name == name && p.region == region {
                return Ok(p.clone());
            }
            return Err(RecordsError::Conflict(id.to_owned()));
        }
        let p = Patient::new(id, name, region, self.clock.now());
        self.save_patient(&p)?;
        Ok(p)
    }

    /// Store a record. Saving an identical record again is a no-op.
    pub fn save_record(&mut self, r: &TestRecord) -> Result<bool, RecordsError> {
        check_id(&r.record_id)?;
        check_id(&r.device_id)?;
        if self.index.patient(&r.patient_id).is_none() {
            return Err(RecordsError::UnknownPatient(r.patient_id.clone()));
        }
        let line = r.to_line();
        match self.index.record_line(&r.record_id) {
            Some(existing) if existing == line => return Ok(false),
            Some(_) => return Err(RecordsError::Conflict(r.record_id.clone())),
            None => {}
        }
        append_line(&mut self.file, &line)?;
        self.index.insert_record(r.clone(), line);
        Ok(true)
    }

    /// Build a record with the next id for `device_id` and the current
    /// time, and store it.
    pub fn record(&mut self, patient_id: &str, device_id: &str, kind: TestKind, payload: Payload) -> Result<TestRecord, RecordsError> {
        let id = self.index.next_record_id(device_id);
        let r = TestRecord::new(id, patient_id, device_id, self.clock.now(), kind, payload)?;
        self.save_record(&r)?;
        Ok(r)
    }

    pub fn history(&self, patient_id: &str, kind: Option<TestKind>) -> Result<Vec<&TestRecord>, RecordsError> {
        if self.index.patient(patient_id).is_none() {
            return Err(RecordsError::UnknownPatient(patient_id.to_owned()));
        }
        Ok(self.index.history(patient_id, kind))
    }

    pub fn unsynced_patients(&self) -> Vec<&Patient> {
        self.index.patients().filter(|p| !self.index.is_synced(&SyncTarget::Patient(p.patient_id.clone()))).collect()
    }

    /// Unsynced records ordered by `taken_at`.
    pub fn unsynced_records(&self) -> Vec<&TestRecord> {
        let mut out: Vec<&TestRecord> = self
            .index
            .records
            .values()
            .map(|(r, _)| r)
            .filter(|r| !self.index.is_synced(&SyncTarget::Record(r.record_id.clone())))
            .collect();
        out.sort_by(|a, b| a.taken_at.cmp(&b.taken_at).then_with(|| a.record_id.cmp(&b.record_id)));
        out
    }

    pub fn mark_synced(&mut self, target: SyncTarget) -> Result<(), RecordsError> {
        if self.index.is_synced(&target) {
            return Ok(());
        }
        append_line(&mut self.file, &LogLine::Synced { target: target.clone() }.to_line())?;
        self.index.mark_synced(target);
        Ok(())
    }

    pub fn screen_patient(&self, patient_id: &str, cfg: &ScreeningConfig) -> Result<Option<TrendFlag>, RecordsError> {
        if self.index.patient(patient_id).is_none() {
            return Err(RecordsError::UnknownPatient(patient_id.to_owned()));
        }
        Ok(self.index.screen_patient(patient_id, cfg))
    }

    pub fn screen_region(&self, region: &str, cfg: &ScreeningConfig) -> Option<RegionalAlert> {
        self.index.screen_region(region, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn clock() -> Box<dyn Clock> {
        Box::new(FixedStepClock::new(Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap(), Duration::minutes(1)))
    }

    fn weight(kg: f64) -> Payload {
        Payload::scalar(TestKind::Weight, kg).unwrap()
    }

    #[test]
    fn save_reopen_history() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut s = RecordStore::open_with_clock(&path, clock()).unwrap();
        s.add_patient("p1", "Ana", "north").unwrap();
        let r1 = s.record("p1", "dev", TestKind::Weight, weight(70.0)).unwrap();
        let r2 = s.record("p1", "dev", TestKind::Temperature, Payload::scalar(TestKind::Temperature, 36.6).unwrap()).unwrap();
        assert_eq!(r1.record_id, "dev-000001");
        assert_eq!(r2.record_id, "dev-000002");
        assert!(!s.save_record(&r1).unwrap());
        drop(s);
        let s = RecordStore::open(&path).unwrap();
        assert_eq!(s.history("p1", None).unwrap(), vec![&r1, &r2]);
        assert_eq!(s.history("p1", Some(TestKind::Weight)).unwrap(), vec![&r1]);
        assert_eq!(s.index().next_record_id("dev"), "dev-000003");
        assert!(matches!(s.history("nobody", None), Err(RecordsError::UnknownPatient(_))));
    }

    #[test]
    fn out_of_order_saves_come_back_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = RecordStore::open(dir.path().join("s.jsonl")).unwrap();
        s.add_patient("p", "B", "r").unwrap();
        let base = Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap();
        for (i, day) in [3, 1, 2].into_iter().enumerate() {
            let r = TestRecord::new(format!("d-{i}"), "p", "d", base + Duration::days(day), TestKind::Weight, weight(70.0 - day as f64)).unwrap();
            s.save_record(&r).unwrap();
        }
        let days: Vec<i64> = s.history("p", None).unwrap().iter().map(|r| (r.taken_at - base).num_days()).collect();
        assert_eq!(days, [1, 2, 3]);
    }

    #[test]
    fn conflicting_duplicate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = RecordStore::open_with_clock(dir.path().join("s.jsonl"), clock()).unwrap();
        s.add_patient("p", "B", "r").unwrap();
        assert!(matches!(s.add_patient("p", "C", "r"), Err(RecordsError::Conflict(_))));
        let r = s.record("p", "d", TestKind::Weight, weight(70.0)).unwrap();
        let mut other = r.clone();
        other.payload = weight(71.0);
        assert!(matches!(s.save_record(&other), Err(RecordsError::Conflict(_))));
        let mut orphan = r.clone();
        orphan.record_id = "x".into();
        orphan.patient_id = "ghost".into();
        assert!(matches!(s.save_record(&orphan), Err(RecordsError::UnknownPatient(_))));
        assert!(matches!(s.add_patient("has space", "n", "r"), Err(RecordsError::BadId(_))));
    }

    #[test]
    fn torn_tail_is_dropped_at_every_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut s = RecordStore::open_with_clock(&path, clock()).unwrap();
        s.add_patient("p", "B", "r").unwrap();
        let first = s.record("p", "d", TestKind::Weight, weight(70.0)).unwrap();
        s.record("p", "d", TestKind::Weight, weight(69.0)).unwrap();
        drop(s);
        let full = std::fs::read(&path).unwrap();
        let last_start = full[..full.len() - 1].iter().rposition(|b| *b == b'\n').unwrap() + 1;
        for cut in last_start..full.len() {
            std::fs::write(&path, &full[..cut]).unwrap();
            let s = RecordStore::open(&path).unwrap();
            assert_eq!(s.history("p", None).unwrap(), vec![&first], "cut at {cut}");
            assert_eq!(std::fs::read(&path).unwrap(), &full[..last_start]);
        }
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, "{\"type\":\"patient\"}\n").unwrap();
        assert!(matches!(RecordStore::open(&path), Err(RecordsError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn sync_markers_persist() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut s = RecordStore::open_with_clock(&path, clock()).unwrap();
        s.add_patient("p", "B", "r").unwrap();
        let r = s.record("p", "d", TestKind::Weight, weight(70.0)).unwrap();
        assert_eq!(s.unsynced_records().len(), 1);
        s.mark_synced(SyncTarget::Record(r.record_id.clone())).unwrap();
        s.mark_synced(SyncTarget::Patient("p".into())).unwrap();
        drop(s);
        let s = RecordStore::open(&path).unwrap();
        assert!(s.unsynced_records().is_empty());
        assert!(s.unsynced_patients().is_empty());
    }

    #[test]
    fn screening_through_store() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = RecordStore::open_with_clock(dir.path().join("s.jsonl"), clock()).unwrap();
        let cfg = ScreeningConfig::default();
        for pid in ["a", "b", "c", "d", "e"] {
            s.add_patient(pid, pid, "hill").unwrap();
            let kgs: &[f64] = if pid == "a" { &[70.0, 68.0, 66.0] } else { &[60.0, 60.5, 61.0] };
            for kg in kgs {
                s.record(pid, "d", TestKind::Weight, weight(*kg)).unwrap();
            }
        }
        let flag = s.screen_patient("a", &cfg).unwrap().unwrap();
        assert_eq!(flag.evidence.len(), 3);
        let alert = s.screen_region("hill", &cfg).unwrap();
        assert_eq!((alert.flagged, alert.eligible), (1, 5));
        assert!(s.screen_region("valley", &cfg).is_none());
    }
}
