//! Oscillometric blood pressure: beat envelope and ratio-based SP/DP.

use serde::{Deserialize, Serialize};

use super::dsp::extract_ow;
use super::DiagnosticsError;

/// Envelope fraction marking systolic pressure, on the high-pressure side.
pub const SYSTOLIC_RATIO: f64 = 0.5;
/// Envelope fraction marking diastolic pressure, on the low-pressure side.
pub const DIASTOLIC_RATIO: f64 = 0.7;

const MIN_BEATS: usize = 5;
/// Peak-to-trough amplitude a beat needs to count as a pulse. Sensor noise
/// and ADC steps on a pulseless cuff stay well below this.
pub const MIN_PULSE_MMHG: f64 = 1.0;
const MIN_BPM: f64 = 30.0;
const MAX_BPM: f64 = 300.0;
/// Hysteresis band for beat segmentation, as a fraction of the largest |OW|.
const HYSTERESIS: f64 = 0.1;
/// Beats below this fraction of the peak amplitude don't vote on heart rate.
const HR_AMPLITUDE_RATIO: f64 = 0.5;
/// Smoothing window for the deflation trend, seconds.
const TREND_WINDOW_S: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub cuff_mmhg: f64,
    pub amplitude_mmhg: f64,
    pub beat_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OscillationEnvelope {
    pub points: Vec<EnvelopePoint>,
}

impl OscillationEnvelope {
    pub fn max_point(&self) -> Option<(usize, &EnvelopePoint)> {
        self.points
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &EnvelopePoint)>, (i, p)| match best {
                Some((_, b)) if b.amplitude_mmhg >= p.amplitude_mmhg => best,
                _ => Some((i, p)),
            })
    }

    /// Cuff pressure at the vertex of a parabola through the largest
    /// amplitude and its neighbours.
    pub fn peak_pressure(&self) -> Option<f64> {
        let (i, peak) = self.max_point()?;
        if i == 0 || i + 1 >= self.points.len() {
            return Some(peak.cuff_mmhg);
        }
        let (a, b, c) = (&self.points[i - 1], peak, &self.points[i + 1]);
        let (x0, x1, x2) = (a.cuff_mmhg, b.cuff_mmhg, c.cuff_mmhg);
        let (y0, y1, y2) = (a.amplitude_mmhg, b.amplitude_mmhg, c.amplitude_mmhg);
        let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
        let ca = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
        let cb = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
        if ca >= 0.0 {
            return Some(peak.cuff_mmhg);
        }
        Some((-cb / (2.0 * ca)).clamp(x2, x0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpResult {
    pub systolic: f64,
    pub diastolic: f64,
    pub map: f64,
    pub heart_rate: f64,
}

/// Segment the OW into beats and record one envelope point per beat.
///
/// `ow` and `pressure_series` share a time base sample for sample.
pub fn ow_envelope(ow: &[f64], pressure_series: &[(f64, f64)]) -> Result<OscillationEnvelope, DiagnosticsError> {
    assert_eq!(ow.len(), pressure_series.len(), "OW and pressure series must align");
    let n = ow.len();
    if n < 3 {
        return Err(DiagnosticsError::NoBeats(0));
    }
    let dt = (pressure_series[n - 1].0 - pressure_series[0].0) / (n - 1) as f64;
    let fs = 1.0 / dt;

    let peak_abs = ow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak_abs <= 0.0 || !peak_abs.is_finite() {
        return Err(DiagnosticsError::NoBeats(0));
    }
    let h = HYSTERESIS * peak_abs;

    // Rising crossings of the hysteresis band delimit beats.
    let mut rises = Vec::new();
    let mut armed = false;
    for (i, &v) in ow.iter().enumerate() {
        if v <= -h {
            armed = true;
        } else if armed && v >= h {
            rises.push(i);
            armed = false;
        }
    }

    let trend = smoothed_trend(ow, pressure_series, ((TREND_WINDOW_S * fs).round() as usize).max(1));
    let min_len = (60.0 / MAX_BPM * fs).floor() as usize;
    let max_len = (60.0 / MIN_BPM * fs).ceil() as usize;

    let mut points: Vec<EnvelopePoint> = Vec::new();
    for w in rises.windows(2) {
        let (start, end) = (w[0], w[1]);
        let len = end - start;
        if len < min_len || len > max_len {
            continue;
        }
        let peak = argmax(&ow[start..end]) + start;
        let trough = argmin(&ow[peak..end]) + peak;
        let amplitude = ow[peak] - ow[trough];
        let t_peak = pressure_series[peak].0 + parabolic_offset(ow, peak) * dt;
        // The peak-to-trough swing describes the cuff halfway between the two.
        let cuff = trend[(peak + trough) / 2];
        if points.last().is_some_and(|p| cuff >= p.cuff_mmhg) {
            continue;
        }
        points.push(EnvelopePoint { cuff_mmhg: cuff, amplitude_mmhg: amplitude, beat_time_s: t_peak });
    }

    if points.len() < MIN_BEATS {
        return Err(DiagnosticsError::NoBeats(points.len()));
    }
    Ok(OscillationEnvelope { points })
}

/// Cuff pressure with the oscillation removed, lightly smoothed.
fn smoothed_trend(ow: &[f64], series: &[(f64, f64)], window: usize) -> Vec<f64> {
    let base: Vec<f64> = series.iter().zip(ow).map(|((_, p), o)| p - o).collect();
    let half = window / 2;
    let mut prefix = Vec::with_capacity(base.len() + 1);
    prefix.push(0.0);
    for v in &base {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..base.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(base.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |b, (i, v)| if *v > xs[b] { i } else { b })
}

fn argmin(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |b, (i, v)| if *v < xs[b] { i } else { b })
}

/// Sub-sample position of a peak from a parabola through its neighbours.
fn parabolic_offset(xs: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= xs.len() {
        return 0.0;
    }
    let (a, b, c) = (xs[i - 1], xs[i], xs[i + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < f64::EPSILON {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    }
}

/// Ratio method on the envelope: MAP at the peak, SP where the amplitude
/// falls to [`SYSTOLIC_RATIO`] above MAP, DP where it falls to
/// [`DIASTOLIC_RATIO`] below MAP.
pub fn estimate_bp(env: &OscillationEnvelope) -> Result<BpResult, DiagnosticsError> {
    let pts = &env.points;
    let pulses = pts.iter().filter(|p| p.amplitude_mmhg >= MIN_PULSE_MMHG).count();
    if pulses < MIN_BEATS {
        return Err(DiagnosticsError::NoBeats(pulses));
    }
    let (imax, peak) = env.max_point().expect("nonempty");
    let a_max = peak.amplitude_mmhg;
    let map = peak.cuff_mmhg;

    // Earlier beats sit at higher cuff pressure.
    let sp_thr = SYSTOLIC_RATIO * a_max;
    let systolic = (0..imax)
        .rev()
        .find(|&j| pts[j].amplitude_mmhg <= sp_thr)
        .map(|j| interpolate(&pts[j], &pts[j + 1], sp_thr))
        .ok_or(DiagnosticsError::NoSystolicCrossing)?;

    let dp_thr = DIASTOLIC_RATIO * a_max;
    let diastolic = (imax + 1..pts.len())
        .find(|&j| pts[j].amplitude_mmhg <= dp_thr)
        .map(|j| interpolate(&pts[j], &pts[j - 1], dp_thr))
        .ok_or(DiagnosticsError::NoDiastolicCrossing)?;

    let heart_rate = heart_rate_bpm(pts, a_max);
    if !(MIN_BPM..=MAX_BPM).contains(&heart_rate) {
        return Err(DiagnosticsError::HeartRateOutOfRange(heart_rate));
    }
    Ok(BpResult { systolic, diastolic, map, heart_rate })
}

/// Cuff pressure where the amplitude crosses `thr` between `below` (at or
/// under the threshold) and `above`.
fn interpolate(below: &EnvelopePoint, above: &EnvelopePoint, thr: f64) -> f64 {
    let frac = (thr - below.amplitude_mmhg) / (above.amplitude_mmhg - below.amplitude_mmhg);
    below.cuff_mmhg + frac * (above.cuff_mmhg - below.cuff_mmhg)
}

fn heart_rate_bpm(pts: &[EnvelopePoint], a_max: f64) -> f64 {
    let strong = |p: &EnvelopePoint| p.amplitude_mmhg >= HR_AMPLITUDE_RATIO * a_max;
    let mut intervals: Vec<f64> = pts
        .windows(2)
        .filter(|w| strong(&w[0]) && strong(&w[1]))
        .map(|w| w[1].beat_time_s - w[0].beat_time_s)
        .collect();
    if intervals.is_empty() {
        intervals = pts.windows(2).map(|w| w[1].beat_time_s - w[0].beat_time_s).collect();
    }
    60.0 / median(&mut intervals)
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

/// Full pipeline from a uniformly sampled cuff record.
pub fn estimate_bp_from_series(
    series: &[(f64, f64)],
    sample_rate: f64,
) -> Result<(BpResult, OscillationEnvelope), DiagnosticsError> {
    let ow = extract_ow(series, sample_rate)?;
    let env = ow_envelope(&ow, series)?;
    let bp = estimate_bp(&env)?;
    Ok((bp, env))
}
