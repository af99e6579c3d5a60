//! Turning ADC codes and sample streams into medical results.

mod dsp;
mod hearing;
mod height;
mod optics;
mod oscillometry;

pub use dsp::{extract_ow, Biquad, BandPass, StreamingBandPass, MIN_SERIES_S, OW_HIGH_HZ, OW_LOW_HZ};
pub use hearing::{
    audiogram, hearing_step, Audiogram, AudiogramEntry, HearingEvent, HearingState, LEVEL_MAX_DB,
    LEVEL_MIN_DB, LEVEL_STEP_DB, MAX_STEPS, SWEEP_FREQUENCIES,
};
pub use height::{height_from_pixels, HeightInput, Pixel, MIN_RULER_PX};
pub use optics::{eye_power, eye_power_trace, EyePowerTrace, LensBench};
pub use oscillometry::{
    estimate_bp, estimate_bp_from_series, ow_envelope, BpResult, EnvelopePoint, OscillationEnvelope,
    DIASTOLIC_RATIO, MIN_PULSE_MMHG, SYSTOLIC_RATIO,
};

use serde::{Deserialize, Serialize};

use crate::biosim::MMHG_PER_KPA;

const VREF: f64 = 5.0;
const ADC_LEVELS: f64 = 1024.0;
const ADC_MAX: f64 = 1023.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("ADC code {0} outside [0, 1023]")]
    CodeOutOfRange(u16),
    #[error("invalid calibration: {0}")]
    InvalidCalibration(&'static str),
    #[error("pressure series too short: {0:.2} s")]
    TooShort(f64),
    #[error("nonuniform sampling at t = {0:.3} s")]
    NonuniformSampling(f64),
    #[error("fewer than 5 pulses detected ({0})")]
    NoBeats(usize),
    #[error("envelope never falls below the systolic ratio above MAP")]
    NoSystolicCrossing,
    #[error("envelope never falls below the diastolic ratio below MAP")]
    NoDiastolicCrossing,
    #[error("heart rate {0:.1} bpm outside [30, 300]")]
    HeartRateOutOfRange(f64),
    #[error("lens system is degenerate (f1 + f2 - d = {0:e})")]
    DegenerateLensSystem(f64),
    #[error("ruler spans only {0:.1} px")]
    DegenerateRuler(f64),
    #[error("head and foot marks coincide")]
    DegenerateBody,
    #[error("hearing sweep already finished")]
    StepAfterFinish,
    #[error("hearing sweep not finished")]
    NotFinished,
}

impl DiagnosticsError {
    /// Short kebab-case tag for machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            DiagnosticsError::CodeOutOfRange(_) => "code-out-of-range",
            DiagnosticsError::InvalidCalibration(_) => "invalid-calibration",
            DiagnosticsError::TooShort(_) => "too-short",
            DiagnosticsError::NonuniformSampling(_) => "nonuniform-sampling",
            DiagnosticsError::NoBeats(_) => "NoBeats",
            DiagnosticsError::NoSystolicCrossing => "NoSystolicCrossing",
            DiagnosticsError::NoDiastolicCrossing => "NoDiastolicCrossing",
            DiagnosticsError::HeartRateOutOfRange(_) => "heart-rate-out-of-range",
            DiagnosticsError::DegenerateLensSystem(_) => "degenerate-lens-system",
            DiagnosticsError::DegenerateRuler(_) => "degenerate-ruler",
            DiagnosticsError::DegenerateBody => "degenerate-body",
            DiagnosticsError::StepAfterFinish => "step-after-finish",
            DiagnosticsError::NotFinished => "not-finished",
        }
    }
}

fn check_code(code: u16) -> Result<f64, DiagnosticsError> {
    if f64::from(code) > ADC_MAX {
        return Err(DiagnosticsError::CodeOutOfRange(code));
    }
    Ok(f64::from(code) * VREF / ADC_LEVELS)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TemperatureCalib {
    pub offset_c: f64,
}

impl TemperatureCalib {
    pub fn new(offset_c: f64) -> Result<Self, DiagnosticsError> {
        if !(offset_c.is_finite() && offset_c.abs() <= 5.0) {
            return Err(DiagnosticsError::InvalidCalibration("temperature offset must be within ±5 °C"));
        }
        Ok(TemperatureCalib { offset_c })
    }
}

/// Body temperatures outside this band are reported but flagged.
pub const PLAUSIBLE_BODY_TEMP_C: (f64, f64) = (30.0, 45.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureReading {
    pub celsius: f64,
    pub implausible: bool,
}

pub fn temperature_from_code(code: u16, calib: &TemperatureCalib) -> Result<TemperatureReading, DiagnosticsError> {
    let v = check_code(code)?;
    let celsius = v / 0.010 + calib.offset_c;
    let (lo, hi) = PLAUSIBLE_BODY_TEMP_C;
    Ok(TemperatureReading { celsius, implausible: !(lo..=hi).contains(&celsius) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressureReading {
    pub mmhg: f64,
    /// Sensor output below its zero-pressure offset: cuff likely disconnected.
    pub underflow: bool,
    /// Output past the sensor's rated span; the reading is pinned at full scale.
    pub overflow: bool,
}

pub fn pressure_from_code(code: u16) -> Result<PressureReading, DiagnosticsError> {
    let v = check_code(code)?;
    Ok(pressure_from_volts(v))
}

pub(crate) fn pressure_from_volts(v: f64) -> PressureReading {
    let full_scale = crate::biosim::SensorConstants::default().mpx_max_mmhg();
    let p = MMHG_PER_KPA * (v / VREF - 0.04) / 0.018;
    PressureReading { mmhg: p.clamp(0.0, full_scale), underflow: v < 0.2, overflow: p > full_scale }
}

/// Line through two (code, value) anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPointCalib {
    pub code_lo: f64,
    pub code_hi: f64,
    pub value_lo: f64,
    pub value_hi: f64,
}

impl TwoPointCalib {
    pub fn new(code_lo: f64, value_lo: f64, code_hi: f64, value_hi: f64) -> Result<Self, DiagnosticsError> {
        if code_lo == code_hi || ![code_lo, code_hi, value_lo, value_hi].iter().all(|x| x.is_finite()) {
            return Err(DiagnosticsError::InvalidCalibration("two-point anchors must have distinct codes"));
        }
        Ok(TwoPointCalib { code_lo, code_hi, value_lo, value_hi })
    }

    pub fn apply(&self, code: f64) -> f64 {
        self.value_lo + (code - self.code_lo) * (self.value_hi - self.value_lo) / (self.code_hi - self.code_lo)
    }
}

impl Default for TwoPointCalib {
    /// The nominal scale: 0 kg at code 0 and the load that would drive the
    /// amplifier to the reference voltage (187.5 kg) at code 1024.
    fn default() -> Self {
        let k = crate::biosim::SensorConstants::default();
        let kg_at_vref = k.loadcell_capacity_kg * VREF / k.loadcell_fullscale_volts();
        TwoPointCalib { code_lo: 0.0, code_hi: ADC_LEVELS, value_lo: 0.0, value_hi: kg_at_vref }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightReading {
    pub kg: f64,
    /// Result below zero: the cell has drifted and needs a re-tare.
    pub negative: bool,
}

pub fn weight_from_code(code: u16, calib: &TwoPointCalib) -> Result<WeightReading, DiagnosticsError> {
    check_code(code)?;
    let kg = calib.apply(f64::from(code));
    Ok(WeightReading { kg, negative: kg < 0.0 })
}

/// Affine map from pot code to lens separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotCalib {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for PotCalib {
    fn default() -> Self {
        PotCalib { d_min: 0.015, d_max: 0.075 }
    }
}

impl PotCalib {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self, DiagnosticsError> {
        if !(d_min > 0.0 && d_min < d_max && d_max.is_finite()) {
            return Err(DiagnosticsError::InvalidCalibration("pot travel needs 0 < d_min < d_max"));
        }
        Ok(PotCalib { d_min, d_max })
    }

    pub fn travel(&self) -> f64 {
        self.d_max - self.d_min
    }
}

pub fn pot_to_distance(code: u16, pot: &PotCalib) -> Result<f64, DiagnosticsError> {
    check_code(code)?;
    Ok(pot.d_min + f64::from(code) / ADC_MAX * pot.travel())
}
