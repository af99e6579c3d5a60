//! Weight-trend flags per patient and regional alerts.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreeningConfig {
    /// Minimum length of the decreasing run.
    pub min_run: usize,
    /// Minimum relative drop across the run.
    pub min_drop: f64,
    /// Share of eligible patients that must be flagged to raise an alert.
    pub region_fraction: f64,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        ScreeningConfig { min_run: 3, min_drop: 0.05, region_fraction: 0.20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPoint {
    pub record_id: String,
    pub kg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendRule {
    WeightDecline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFlag {
    pub patient_id: String,
    pub rule: TrendRule,
    /// Relative drop across the run.
    pub severity: f64,
    /// Record ids of the decreasing run, oldest first.
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalAlert {
    pub region: String,
    pub flagged: usize,
    pub eligible: usize,
    pub fraction: f64,
    pub patients: Vec<TrendFlag>,
}

/// Flag the longest strictly decreasing run at the end of a chronological
/// weight history.
pub fn screen_weight(patient_id: &str, history: &[WeightPoint], cfg: &ScreeningConfig) -> Option<TrendFlag> {
    let n = history.len();
    if n == 0 {
        return None;
    }
    let mut start = n - 1;
    while start > 0 && history[start - 1].kg > history[start].kg {
        start -= 1;
    }
    let run = &history[start..];
    if run.len() < cfg.min_run.max(2) {
        return None;
    }
    let first = run[0].kg;
    let last = run[run.len() - 1].kg;
    if !(first > 0.0) {
        return None;
    }
    let severity = (first - last) / first;
    (severity >= cfg.min_drop).then(|| TrendFlag {
        patient_id: patient_id.to_owned(),
        rule: TrendRule::WeightDecline,
        severity,
        evidence: run.iter().map(|p| p.record_id.clone()).collect(),
    })
}

/// Read access to patients and their weight histories.
pub trait WeightSource {
    /// Patient ids registered in `region`, sorted.
    fn patients_in_region(&self, region: &str) -> Vec<String>;
    /// Chronological weight history.
    fn weight_history(&self, patient_id: &str) -> Vec<WeightPoint>;
}

/// Patients with fewer than `min_run` weights are not eligible.
pub fn screen_region<S: WeightSource + ?Sized>(source: &S, region: &str, cfg: &ScreeningConfig) -> Option<RegionalAlert> {
    let mut eligible = 0;
    let mut flags = Vec::new();
    for pid in source.patients_in_region(region) {
        let hist = source.weight_history(&pid);
        if hist.len() < cfg.min_run {
            continue;
        }
        eligible += 1;
        if let Some(f) = screen_weight(&pid, &hist, cfg) {
            flags.push(f);
        }
    }
    if eligible == 0 {
        return None;
    }
    let fraction = flags.len() as f64 / eligible as f64;
    (fraction >= cfg.region_fraction).then(|| RegionalAlert {
        region: region.to_owned(),
        flagged: flags.len(),
        eligible,
        fraction,
        patients: flags,
    })
}
