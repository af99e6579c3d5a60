//! Band-pass filtering of the cuff pressure stream.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::DiagnosticsError;

pub const OW_LOW_HZ: f64 = 0.5;
pub const OW_HIGH_HZ: f64 = 5.0;

/// Shortest pressure record the oscillometric pipeline accepts.
pub const MIN_SERIES_S: f64 = 10.0;

/// Second-order section, transposed direct form II, normalised so a0 = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Butterworth low-pass (bilinear, prewarped at the corner).
    pub fn lowpass(fs: f64, f0: f64) -> Self {
        let (cos_w, alpha) = Self::prewarp(fs, f0);
        let a0 = 1.0 + alpha;
        let b1 = (1.0 - cos_w) / a0;
        Biquad { b: [b1 / 2.0, b1, b1 / 2.0], a: [-2.0 * cos_w / a0, (1.0 - alpha) / a0] }
    }

    pub fn highpass(fs: f64, f0: f64) -> Self {
        let (cos_w, alpha) = Self::prewarp(fs, f0);
        let a0 = 1.0 + alpha;
        let b0 = (1.0 + cos_w) / 2.0 / a0;
        Biquad { b: [b0, -2.0 * b0, b0], a: [-2.0 * cos_w / a0, (1.0 - alpha) / a0] }
    }

    fn prewarp(fs: f64, f0: f64) -> (f64, f64) {
        let w0 = 2.0 * PI * f0 / fs;
        (w0.cos(), w0.sin() / (2.0 * FRAC_1_SQRT_2))
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// State that makes the section sit at steady state for constant input `x`.
    fn steady_state(&self, x: f64) -> [f64; 2] {
        let y = self.dc_gain() * x;
        let z2 = self.b[2] * x - self.a[1] * y;
        let z1 = self.b[1] * x - self.a[0] * y + z2;
        [z1, z2]
    }

    #[inline]
    fn step(&self, z: &mut [f64; 2], x: f64) -> f64 {
        let y = self.b[0] * x + z[0];
        z[0] = self.b[1] * x - self.a[0] * y + z[1];
        z[1] = self.b[2] * x - self.a[1] * y;
        y
    }

    /// Magnitude response at `f` Hz.
    pub fn gain_at(&self, fs: f64, f: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * c1 + self.b[2] * c2, -(self.b[1] * s1 + self.b[2] * s2));
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, -(self.a[0] * s1 + self.a[1] * s2));
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// High-pass and low-pass Butterworth sections in cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPass {
    pub fs: f64,
    sections: [Biquad; 2],
}

impl BandPass {
    pub fn new(fs: f64, low_hz: f64, high_hz: f64) -> Self {
        BandPass { fs, sections: [Biquad::highpass(fs, low_hz), Biquad::lowpass(fs, high_hz)] }
    }

    pub fn oscillometric(fs: f64) -> Self {
        Self::new(fs, OW_LOW_HZ, OW_HIGH_HZ)
    }

    pub fn sections(&self) -> &[Biquad; 2] {
        &self.sections
    }

    /// Single-pass magnitude response.
    pub fn gain_at(&self, f: f64) -> f64 {
        self.sections.iter().map(|s| s.gain_at(self.fs, f)).product()
    }

    fn run(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let mut input0 = first;
        for s in &self.sections {
            let mut z = s.steady_state(input0);
            input0 *= s.dc_gain();
            for v in x.iter_mut() {
                *v = s.step(&mut z, *v);
            }
        }
    }

    /// Zero-phase forward-backward filtering with odd-reflection padding.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return vec![0.0; n];
        }
        let pad = ((3.0 * self.fs).round() as usize).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }

    pub fn streaming(&self) -> StreamingBandPass {
        StreamingBandPass { filter: self.clone(), state: None }
    }
}

/// Causal, sample-at-a-time version for live display.
#[derive(Debug, Clone)]
pub struct StreamingBandPass {
    filter: BandPass,
    state: Option<[[f64; 2]; 2]>,
}

impl StreamingBandPass {
    pub fn push(&mut self, x: f64) -> f64 {
        let sections = self.filter.sections;
        let state = self.state.get_or_insert_with(|| {
            let z0 = sections[0].steady_state(x);
            let z1 = sections[1].steady_state(x * sections[0].dc_gain());
            [z0, z1]
        });
        let mid = sections[0].step(&mut state[0], x);
        sections[1].step(&mut state[1], mid)
    }
}

/// Extract the oscillation waveform from a uniformly sampled cuff record.
///
/// The result has the same length as the input and zero mean.
pub fn extract_ow(series: &[(f64, f64)], sample_rate: f64) -> Result<Vec<f64>, DiagnosticsError> {
    let span = match (series.first(), series.last()) {
        (Some(a), Some(b)) => b.0 - a.0,
        _ => 0.0,
    };
    if series.len() < 2 || span + 0.5 / sample_rate < MIN_SERIES_S {
        return Err(DiagnosticsError::TooShort(span.max(0.0)));
    }
    let max_gap = 3.0 / sample_rate * (1.0 + 1e-6);
    for w in series.windows(2) {
        let dt = w[1].0 - w[0].0;
        if !(dt > 0.0) || dt > max_gap {
            return Err(DiagnosticsError::NonuniformSampling(w[0].0));
        }
    }
    let values: Vec<f64> = series.iter().map(|s| s.1).collect();
    let mut ow = BandPass::oscillometric(sample_rate).filtfilt(&values);
    let mean = ow.iter().sum::<f64>() / ow.len() as f64;
    ow.iter_mut().for_each(|v| *v -= mean);
    Ok(ow)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 100.0;

    fn series(duration_s: f64, f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        let n = (duration_s * FS).round() as usize;
        (0..=n).map(|i| {
            let t = i as f64 / FS;
            (t, f(t))
        }).collect()
    }

    fn steady(ow: &[f64], edge_s: f64) -> &[f64] {
        let k = (edge_s * FS) as usize;
        &ow[k..ow.len() - k]
    }

    #[test]
    fn butterworth_corners() {
        let bp = BandPass::oscillometric(FS);
        let hp = bp.sections()[0];
        let lp = bp.sections()[1];
        assert!((hp.gain_at(FS, OW_LOW_HZ) - FRAC_1_SQRT_2).abs() < 1e-9);
        assert!((lp.gain_at(FS, OW_HIGH_HZ) - FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(hp.dc_gain().abs() < 1e-12);
        assert!((lp.dc_gain() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ramp_is_rejected() {
        let s = series(50.0, |t| 180.0 - 3.0 * t);
        let ow = extract_ow(&s, FS).unwrap();
        let span = 150.0;
        let worst = steady(&ow, 1.0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst <= 1e-3 * span, "{worst}");
    }

    #[test]
    fn passband_sinusoid_keeps_amplitude() {
        let s = series(40.0, |t| 180.0 - 3.0 * t + 2.0 * (2.0 * PI * 1.2 * t).sin());
        let ow = extract_ow(&s, FS).unwrap();
        let mid = steady(&ow, 5.0);
        let amp = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Expected gain is the squared single-pass response at 1.2 Hz.
        let expected = 2.0 * BandPass::oscillometric(FS).gain_at(1.2).powi(2);
        assert!((amp - 2.0).abs() <= 0.1, "{amp}");
        assert!((amp - expected).abs() < 0.01, "{amp} vs {expected}");
    }

    #[test]
    fn stopband_attenuation() {
        let s = series(20.0, |t| (2.0 * PI * 10.0 * t).sin());
        let ow = extract_ow(&s, FS).unwrap();
        let amp = steady(&ow, 2.0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let db = 20.0 * amp.log10();
        assert!(db <= -20.0, "{db}");
    }

    #[test]
    fn zero_mean_output() {
        let s = series(30.0, |t| 150.0 - 2.0 * t + 1.5 * (2.0 * PI * 0.9 * t).sin());
        let ow = extract_ow(&s, FS).unwrap();
        let mean = ow.iter().sum::<f64>() / ow.len() as f64;
        assert!(mean.abs() <= 1e-6 * 60.0);
    }

    #[test]
    fn too_short_and_gaps() {
        let s = series(5.0, |_| 0.0);
        assert!(matches!(extract_ow(&s, FS), Err(DiagnosticsError::TooShort(_))));
        let mut s = series(20.0, |_| 0.0);
        s.drain(500..504);
        assert!(matches!(extract_ow(&s, FS), Err(DiagnosticsError::NonuniformSampling(_))));
        // A two-sample hole is still within three intervals.
        let mut s = series(20.0, |_| 0.0);
        s.drain(500..502);
        assert!(extract_ow(&s, FS).is_ok());
    }

    #[test]
    fn streaming_starts_settled() {
        let mut f = BandPass::oscillometric(FS).streaming();
        assert!(f.push(150.0).abs() < 1e-9);
        assert!(f.push(150.0).abs() < 1e-9);
    }
}
