//! Blood pressure run: poll the cuff every tick until the cuff has deflated,
//! then clean, resample and estimate.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::link::{Gate, HubLink, LinkStats};
use super::SessionError;
use crate::biosim::{DEFLATION_FLOOR_MMHG, FILTER_BIAS_V, FILTER_GAIN_V_PER_MMHG};
use crate::diagnostics::{
    estimate_bp, estimate_bp_from_series, ow_envelope, pressure_from_code, BandPass, BpResult, DiagnosticsError,
    OscillationEnvelope, StreamingBandPass, MIN_SERIES_S,
};
use crate::hubsim::AdcModel;
use crate::wireproto::{HubCommand, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpConfig {
    pub poll_ms: f64,
    /// Read the oscillation from the hub's analog band-pass channel instead
    /// of filtering the raw pressure in software.
    pub analog_filter: bool,
    pub attempts_per_tick: u32,
    /// Consecutive ticks without a usable reply before the run is aborted.
    pub max_failed_ticks: u32,
    pub max_duration_s: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig { poll_ms: 10.0, analog_filter: false, attempts_per_tick: 4, max_failed_ticks: 3, max_duration_s: 900.0 }
    }
}

/// One live point for display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BpSample {
    pub t_s: f64,
    pub cuff_mmhg: f64,
    /// Causally filtered oscillation, for display only.
    pub ow: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tick {
    Sample(BpSample),
    /// No usable reply this tick; the gap is bridged later.
    Missed,
    Done,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BpStats {
    pub ticks: u64,
    pub samples: usize,
    pub failed_ticks: u64,
    /// Samples replaced by the outlier filter.
    pub outliers: usize,
    pub link: LinkStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpOutcome {
    pub result: BpResult,
    pub envelope: OscillationEnvelope,
    pub stats: BpStats,
}

// Raw: about 8 mmHg per poll. The analog band-pass output moves up to
// ~65 codes per 10 ms poll at full oscillation, plus noise; its limit
// grows with the polls since the last accepted reading.
const ANCHOR_LEN: usize = 3;
const RAW_GATE: Gate = Gate { jump: 20, agree: 2 };
const FILTERED_JUMP_PER_POLL: u16 = 110;
const FILTERED_AGREE: u16 = 48;
/// Samples whose median must sit at the floor before the run ends; wide
/// enough that a burst of damaged low readings cannot end it early.
const STOP_CONFIRM: usize = 25;
const HAMPEL_HALF_WINDOW: usize = 3;
const HAMPEL_SIGMAS: f64 = 3.0;
const HAMPEL_FLOOR_MMHG: f64 = 1.5;
// The analog channel has 100x the resolution, so damaged digits are small.
const HAMPEL_FLOOR_OW_MMHG: f64 = 0.2;
const HAMPEL_PASSES: usize = 4;
// MAD to standard deviation for Gaussian data.
const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Running,
    Deflated,
    Stopped,
}

pub struct BpRun<T> {
    link: HubLink<T>,
    cfg: BpConfig,
    adc: AdcModel,
    start_ms: f64,
    tick: u64,
    pressure: Vec<(f64, f64)>,
    analog: Vec<(f64, f64)>,
    live: StreamingBandPass,
    failed_in_row: u32,
    failed_ticks: u64,
    phase: Phase,
    // The gate is anchored on the median of these, so one bad reading
    // that slipped through cannot vouch for the next.
    recent_raw: VecDeque<u16>,
    last_filtered: Option<u16>,
    filtered_age: u16,
}

impl<T: Transport> BpRun<T> {
    pub fn new(link: HubLink<T>, cfg: BpConfig) -> Self {
        let start_ms = link.now_ms();
        let live = BandPass::oscillometric(1000.0 / cfg.poll_ms).streaming();
        BpRun {
            link,
            cfg,
            adc: AdcModel::default(),
            start_ms,
            tick: 0,
            pressure: Vec::new(),
            analog: Vec::new(),
            live,
            failed_in_row: 0,
            failed_ticks: 0,
            phase: Phase::Running,
            recent_raw: VecDeque::with_capacity(ANCHOR_LEN),
            last_filtered: None,
            filtered_age: 0,
        }
    }

    pub fn config(&self) -> &BpConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.phase != Phase::Running
    }

    /// Operator pressed stop; whatever was collected is analysed.
    pub fn stop(&mut self) {
        if self.phase == Phase::Running {
            self.phase = Phase::Stopped;
        }
    }

    /// Seconds of simulated time since the run started.
    pub fn elapsed_s(&self) -> f64 {
        (self.link.now_ms() - self.start_ms) / 1000.0
    }

    pub fn link(&self) -> &HubLink<T> {
        &self.link
    }

    /// Pressure samples so far, `(seconds, mmHg)`.
    pub fn samples(&self) -> &[(f64, f64)] {
        &self.pressure
    }

    fn raw_anchor(&self) -> Option<u16> {
        let mut v: Vec<u16> = self.recent_raw.iter().copied().collect();
        v.sort_unstable();
        v.get(v.len() / 2).copied()
    }

    pub fn step(&mut self) -> Result<Tick, SessionError> {
        if self.is_done() {
            return Ok(Tick::Done);
        }
        let due = self.start_ms + self.tick as f64 * self.cfg.poll_ms;
        self.link.wait_until(due);
        self.tick += 1;

        let attempts = self.cfg.attempts_per_tick;
        let implausible_before = self.link.stats.implausible;
        let raw = self.link.sample_consistent(HubCommand::SampleRaw, attempts, self.raw_anchor(), RAW_GATE)?;
        let filtered = match (raw, self.cfg.analog_filter) {
            (Some(_), true) => {
                self.filtered_age = self.filtered_age.saturating_add(1);
                let gate = Gate {
                    jump: FILTERED_JUMP_PER_POLL.saturating_mul(self.filtered_age),
                    agree: FILTERED_AGREE,
                };
                self.link.sample_consistent(HubCommand::SampleFiltered, attempts, self.last_filtered, gate)?
            }
            _ => None,
        };
        // A lost filtered reading leaves a gap that resampling bridges.
        let Some((code, at_ms)) = raw else {
            self.failed_ticks += 1;
            // Replies that arrived intact but could not be confirmed show
            // the link is alive; only silence and garbage count toward loss.
            if self.link.stats.implausible == implausible_before {
                self.failed_in_row += 1;
            }
            if self.failed_in_row >= self.cfg.max_failed_ticks {
                return Err(SessionError::LinkLost { failed_ticks: self.failed_in_row });
            }
            return Ok(Tick::Missed);
        };
        self.failed_in_row = 0;
        if self.recent_raw.len() == ANCHOR_LEN {
            self.recent_raw.pop_front();
        }
        self.recent_raw.push_back(code);
        if let Some((f, _)) = filtered {
            self.last_filtered = Some(f);
            self.filtered_age = 0;
        }

        let t_s = (at_ms - self.start_ms) / 1000.0;
        let mmhg = pressure_from_code(code)?.mmhg;
        self.pressure.push((t_s, mmhg));
        if let Some((fcode, f_at)) = filtered {
            let v = self.adc.code_to_volts(fcode);
            self.analog.push(((f_at - self.start_ms) / 1000.0, (v - FILTER_BIAS_V) / FILTER_GAIN_V_PER_MMHG));
        }
        let ow = self.live.push(mmhg);

        if self.deflated() || t_s >= self.cfg.max_duration_s {
            self.phase = Phase::Deflated;
        }
        Ok(Tick::Sample(BpSample { t_s, cuff_mmhg: mmhg, ow }))
    }

    // A single garbled low reading must not end the run.
    fn deflated(&self) -> bool {
        let n = self.pressure.len();
        if n < STOP_CONFIRM {
            return false;
        }
        let mut tail: Vec<f64> = self.pressure[n - STOP_CONFIRM..].iter().map(|s| s.1).collect();
        median(&mut tail) <= DEFLATION_FLOOR_MMHG
    }

    /// Step until the cuff has deflated.
    pub fn run_to_end(&mut self) -> Result<(), SessionError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<BpOutcome, SessionError> {
        let fs = 1000.0 / self.cfg.poll_ms;
        let mut pressure = self.pressure;
        let mut outliers = hampel(&mut pressure);
        // The valve dump after the floor is a step, not part of the record.
        let keep = pressure.iter().rposition(|s| s.1 > DEFLATION_FLOOR_MMHG).map_or(0, |i| i + 1);
        let dumped = pressure.len() - keep;
        pressure.truncate(keep);
        let series = resample(&pressure, self.cfg.poll_ms / 1000.0);
        let (result, envelope) = if self.cfg.analog_filter {
            let mut analog = self.analog;
            analog.truncate(analog.len().saturating_sub(dumped));
            outliers += hampel_with_floor(&mut analog, HAMPEL_FLOOR_OW_MMHG);
            let mut ow: Vec<f64> = resample(&analog, self.cfg.poll_ms / 1000.0)
                .into_iter()
                .map(|s| s.1)
                .collect();
            ow.resize(series.len(), 0.0);
            let mean = ow.iter().sum::<f64>() / ow.len().max(1) as f64;
            ow.iter_mut().for_each(|v| *v -= mean);
            let span = series.last().map_or(0.0, |l| l.0 - series[0].0);
            if span < MIN_SERIES_S {
                return Err(DiagnosticsError::TooShort(span).into());
            }
            let env = ow_envelope(&ow, &series)?;
            (estimate_bp(&env)?, env)
        } else {
            estimate_bp_from_series(&series, fs)?
        };
        Ok(BpOutcome {
            result,
            envelope,
            stats: BpStats {
                ticks: self.tick,
                samples: pressure.len(),
                failed_ticks: self.failed_ticks,
                outliers,
                link: self.link.stats,
            },
        })
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Replace values far from their 7-sample median with that median.
///
/// Repeated until nothing changes (at most a few passes): a burst of bad
/// samples can outvote one window, but its neighbours repair the edges.
pub fn hampel(series: &mut [(f64, f64)]) -> usize {
    hampel_with_floor(series, HAMPEL_FLOOR_MMHG)
}

fn hampel_with_floor(series: &mut [(f64, f64)], floor: f64) -> usize {
    let mut total = 0;
    for _ in 0..HAMPEL_PASSES {
        let n = hampel_pass(series, floor);
        total += n;
        if n == 0 {
            break;
        }
    }
    total
}

fn hampel_pass(series: &mut [(f64, f64)], floor: f64) -> usize {
    let orig: Vec<f64> = series.iter().map(|s| s.1).collect();
    let n = orig.len();
    let mut replaced = 0;
    let mut window = Vec::with_capacity(2 * HAMPEL_HALF_WINDOW + 1);
    for i in 0..n {
        let lo = i.saturating_sub(HAMPEL_HALF_WINDOW);
        let hi = (i + HAMPEL_HALF_WINDOW + 1).min(n);
        window.clear();
        window.extend_from_slice(&orig[lo..hi]);
        let med = median(&mut window);
        for v in window.iter_mut() {
            *v = (*v - med).abs();
        }
        let mad = median(&mut window);
        let limit = (HAMPEL_SIGMAS * MAD_SCALE * mad).max(floor);
        if (orig[i] - med).abs() > limit {
            series[i].1 = med;
            replaced += 1;
        }
    }
    replaced
}

/// Linear interpolation onto a uniform grid starting at the first sample.
pub fn resample(series: &[(f64, f64)], dt: f64) -> Vec<(f64, f64)> {
    let (Some(first), Some(last)) = (series.first(), series.last()) else {
        return Vec::new();
    };
    let n = ((last.0 - first.0) / dt + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let t = first.0 + k as f64 * dt;
        while j + 1 < series.len() && series[j + 1].0 <= t {
            j += 1;
        }
        let v = match series.get(j + 1) {
            Some(next) if next.0 > series[j].0 => {
                let frac = (t - series[j].0) / (next.0 - series[j].0);
                series[j].1 + frac.clamp(0.0, 1.0) * (next.1 - series[j].1)
            }
            _ => series[j].1,
        };
        out.push((t, v));
    }
    out
}
