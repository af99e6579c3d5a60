//! Ascending pure-tone sweep.
//!
//! Each frequency starts at [`LEVEL_MIN_DB`] and climbs in
//! [`LEVEL_STEP_DB`] steps until the patient responds or the level would
//! pass [`LEVEL_MAX_DB`]; then the sweep moves to the next frequency.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::DiagnosticsError;

pub const SWEEP_FREQUENCIES: [u32; 6] = [250, 500, 1000, 2000, 4000, 8000];
pub const LEVEL_MIN_DB: i32 = -5;
pub const LEVEL_MAX_DB: i32 = 80;
pub const LEVEL_STEP_DB: i32 = 5;
const LEVELS_PER_FREQ: usize = ((LEVEL_MAX_DB - LEVEL_MIN_DB) / LEVEL_STEP_DB + 1) as usize;
/// Upper bound on presentations for a whole sweep.
pub const MAX_STEPS: usize = SWEEP_FREQUENCIES.len() * LEVELS_PER_FREQ;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HearingEvent {
    Heard,
    NotHeard,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AudiogramEntry {
    Threshold(i32),
    NoResponse,
}

impl AudiogramEntry {
    pub fn db(&self) -> Option<i32> {
        match self {
            AudiogramEntry::Threshold(db) => Some(*db),
            AudiogramEntry::NoResponse => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HearingState {
    pub freq_index: usize,
    pub level_db: i32,
    pub results: Vec<(u32, AudiogramEntry)>,
    pub steps: usize,
}

impl Default for HearingState {
    fn default() -> Self {
        HearingState { freq_index: 0, level_db: LEVEL_MIN_DB, results: Vec::new(), steps: 0 }
    }
}

impl HearingState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finished(&self) -> bool {
        self.freq_index >= SWEEP_FREQUENCIES.len()
    }

    /// Tone currently being presented, if any.
    pub fn current(&self) -> Option<(u32, i32)> {
        SWEEP_FREQUENCIES.get(self.freq_index).map(|f| (*f, self.level_db))
    }

    fn advance(&mut self, entry: AudiogramEntry) {
        self.results.push((SWEEP_FREQUENCIES[self.freq_index], entry));
        self.freq_index += 1;
        self.level_db = LEVEL_MIN_DB;
    }
}

pub fn hearing_step(mut state: HearingState, event: HearingEvent) -> Result<HearingState, DiagnosticsError> {
    if state.finished() {
        return Err(DiagnosticsError::StepAfterFinish);
    }
    state.steps += 1;
    match event {
        HearingEvent::Heard => {
            let level = state.level_db;
            state.advance(AudiogramEntry::Threshold(level));
        }
        HearingEvent::NotHeard | HearingEvent::Timeout => {
            if state.level_db + LEVEL_STEP_DB > LEVEL_MAX_DB {
                state.advance(AudiogramEntry::NoResponse);
            } else {
                state.level_db += LEVEL_STEP_DB;
            }
        }
    }
    Ok(state)
}

/// Per-frequency hearing thresholds, ascending by frequency.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Audiogram {
    pub entries: BTreeMap<u32, AudiogramEntry>,
}

pub fn audiogram(state: &HearingState) -> Result<Audiogram, DiagnosticsError> {
    if !state.finished() {
        return Err(DiagnosticsError::NotFinished);
    }
    Ok(Audiogram { entries: state.results.iter().copied().collect() })
}

#[derive(Serialize, Deserialize)]
struct AudiogramRow {
    hz: u32,
    db: Option<i32>,
}

impl Serialize for Audiogram {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<AudiogramRow> = self.entries.iter().map(|(hz, e)| AudiogramRow { hz: *hz, db: e.db() }).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Audiogram {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<AudiogramRow>::deserialize(d)?;
        let entries = rows
            .into_iter()
            .map(|r| (r.hz, r.db.map_or(AudiogramEntry::NoResponse, AudiogramEntry::Threshold)))
            .collect();
        Ok(Audiogram { entries })
    }
}

impl Audiogram {
    /// Text audiogram: one column per frequency, level increasing downwards.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("  dB HL |");
        for hz in self.entries.keys() {
            let _ = write!(out, "{:>6}", hz);
        }
        out.push('\n');
        out.push_str("--------+");
        out.push_str(&"-".repeat(6 * self.entries.len()));
        out.push('\n');
        let mut level = LEVEL_MIN_DB;
        while level <= LEVEL_MAX_DB {
            let _ = write!(out, "{:>7} |", level);
            for e in self.entries.values() {
                let mark = if e.db() == Some(level) { "o" } else { "." };
                let _ = write!(out, "{:>6}", mark);
            }
            out.push('\n');
            level += LEVEL_STEP_DB;
        }
        out.push_str("     NR |");
        for e in self.entries.values() {
            let _ = write!(out, "{:>6}", if e.db().is_none() { "x" } else { " " });
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biosim::{hearing_response, HearingProfile};

    fn run(profile: &HearingProfile) -> HearingState {
        let mut st = HearingState::new();
        while let Some((hz, db)) = st.current() {
            let ev = if hearing_response(profile, hz, f64::from(db)) { HearingEvent::Heard } else { HearingEvent::Timeout };
            st = hearing_step(st, ev).unwrap();
        }
        st
    }

    #[test]
    fn threshold_is_first_grid_level_heard() {
        let profile = HearingProfile { threshold_db: [(1000, 30.0)].into() };
        let gram = audiogram(&run(&profile)).unwrap();
        assert_eq!(gram.entries[&1000], AudiogramEntry::Threshold(30));
        let profile = HearingProfile { threshold_db: [(1000, 27.5)].into() };
        assert_eq!(audiogram(&run(&profile)).unwrap().entries[&1000], AudiogramEntry::Threshold(30));
    }

    #[test]
    fn never_hears() {
        let mut st = HearingState::new();
        for _ in 0..LEVELS_PER_FREQ - 1 {
            st = hearing_step(st, HearingEvent::NotHeard).unwrap();
            assert!(st.results.is_empty());
        }
        st = hearing_step(st, HearingEvent::NotHeard).unwrap();
        assert_eq!(st.results, vec![(250, AudiogramEntry::NoResponse)]);
        assert_eq!(LEVELS_PER_FREQ, 18);

        let st = run(&HearingProfile::deaf());
        assert_eq!(st.steps, MAX_STEPS);
        assert_eq!(MAX_STEPS, 108);
        assert!(audiogram(&st).unwrap().entries.values().all(|e| *e == AudiogramEntry::NoResponse));
    }

    #[test]
    fn first_presentation_heard() {
        let st = hearing_step(HearingState::new(), HearingEvent::Heard).unwrap();
        assert_eq!(st.results, vec![(250, AudiogramEntry::Threshold(-5))]);
        assert_eq!(st.current(), Some((500, -5)));
    }

    #[test]
    fn floor_profile_and_flat_profile() {
        let floor = audiogram(&run(&HearingProfile::flat(-10.0, &SWEEP_FREQUENCIES))).unwrap();
        assert!(floor.entries.values().all(|e| *e == AudiogramEntry::Threshold(-5)));
        let flat = audiogram(&run(&HearingProfile::flat(30.0, &SWEEP_FREQUENCIES))).unwrap();
        assert_eq!(flat.entries.keys().copied().collect::<Vec<_>>(), SWEEP_FREQUENCIES.to_vec());
        assert!(flat.entries.values().all(|e| *e == AudiogramEntry::Threshold(30)));
    }

    #[test]
    fn errors() {
        assert_eq!(audiogram(&HearingState::new()).unwrap_err(), DiagnosticsError::NotFinished);
        let done = run(&HearingProfile::flat(0.0, &SWEEP_FREQUENCIES));
        assert_eq!(hearing_step(done, HearingEvent::Heard).unwrap_err(), DiagnosticsError::StepAfterFinish);
    }

    #[test]
    fn serde_rows() {
        let gram = audiogram(&run(&HearingProfile { threshold_db: [(250, 10.0)].into() })).unwrap();
        let json = serde_json::to_string(&gram).unwrap();
        assert!(json.starts_with(r#"[{"hz":250,"db":10},{"hz":500,"db":null}"#), "{json}");
        let back: Audiogram = serde_json::from_str(&json).unwrap();
        assert_eq!(back, gram);
    }

    #[test]
    fn text_plot_marks_thresholds() {
        let gram = audiogram(&run(&HearingProfile::flat(30.0, &SWEEP_FREQUENCIES))).unwrap();
        let text = gram.render_text();
        let row = text.lines().find(|l| l.trim_start().starts_with("30 |")).unwrap();
        assert_eq!(row.matches('o').count(), 6);
    }
}
