//! Synthetic patients and sensor front-ends.
//!
//! Every generator here is a pure function of its parameters (and of time,
//! for the cuff), so the same values double as ground truth in tests.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::PotCalib;
use crate::hubsim::{Channel, ChannelUnavailable, VirtualModule};

pub const MMHG_PER_KPA: f64 = 7.50062;

/// Cuff pressure at which a deflation run ends.
pub const DEFLATION_FLOOR_MMHG: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BiosimError {
    #[error("{quantity} = {value} is outside the sensor range [{min}, {max}]")]
    OutOfSensorRange { quantity: &'static str, value: f64, min: f64, max: f64 },
    #[error("slide position {0} m is outside the pot travel")]
    OutOfTravel(f64),
    #[error("invalid cuff run: {0}")]
    InvalidCuffRun(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConstants {
    /// LM35 output slope, V/°C.
    pub lm35_slope: f64,
    pub mpx_span_kpa: f64,
    /// MPXV5050GP supply voltage.
    pub mpx_supply: f64,
    /// Load cell rated output, V per V of excitation.
    pub loadcell_fullscale: f64,
    pub loadcell_excitation: f64,
    pub inamp_gain: f64,
    pub loadcell_capacity_kg: f64,
}

impl Default for SensorConstants {
    fn default() -> Self {
        SensorConstants {
            lm35_slope: 0.010,
            mpx_span_kpa: 50.0,
            mpx_supply: 5.0,
            loadcell_fullscale: 0.002,
            loadcell_excitation: 5.0,
            inamp_gain: 400.0,
            loadcell_capacity_kg: 150.0,
        }
    }
}

impl SensorConstants {
    pub fn mpx_max_mmhg(&self) -> f64 {
        self.mpx_span_kpa * MMHG_PER_KPA
    }

    /// Amplified load-cell output at rated capacity.
    pub fn loadcell_fullscale_volts(&self) -> f64 {
        self.loadcell_fullscale * self.loadcell_excitation * self.inamp_gain
    }
}

fn check_range(quantity: &'static str, value: f64, min: f64, max: f64) -> Result<(), BiosimError> {
    if value.is_finite() && value >= min && value <= max {
        Ok(())
    } else {
        Err(BiosimError::OutOfSensorRange { quantity, value, min, max })
    }
}

pub fn lm35_voltage(temp_c: f64, k: &SensorConstants) -> Result<f64, BiosimError> {
    check_range("temperature_c", temp_c, 0.0, 150.0)?;
    Ok(k.lm35_slope * temp_c)
}

/// MPXV5050GP transfer: `V = Vs·(0.018·P_kPa + 0.04)`.
pub fn mpx_voltage(p_mmhg: f64, k: &SensorConstants) -> Result<f64, BiosimError> {
    // Allow the rounding slack of the mmHg rendering of 50 kPa.
    check_range("pressure_mmhg", p_mmhg, 0.0, k.mpx_max_mmhg() + 1e-6)?;
    Ok(mpx_transfer(p_mmhg, k))
}

fn mpx_transfer(p_mmhg: f64, k: &SensorConstants) -> f64 {
    k.mpx_supply * (0.018 * (p_mmhg / MMHG_PER_KPA) + 0.04)
}

pub fn loadcell_voltage(weight_kg: f64, k: &SensorConstants) -> Result<f64, BiosimError> {
    check_range("weight_kg", weight_kg, 0.0, k.loadcell_capacity_kg)?;
    Ok(weight_kg / k.loadcell_capacity_kg * k.loadcell_fullscale_volts())
}

pub fn slidepot_voltage(d: f64, pot: &PotCalib) -> Result<f64, BiosimError> {
    if !(d.is_finite() && d >= pot.d_min && d <= pot.d_max) {
        return Err(BiosimError::OutOfTravel(d));
    }
    Ok(5.0 * (d - pot.d_min) / (pot.d_max - pot.d_min))
}

/// Ground truth for one oscillometric deflation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CuffRunParams {
    pub p_start: f64,
    pub deflation_rate: f64,
    pub map_true: f64,
    pub amp_max: f64,
    pub sigma: f64,
    pub heart_rate_hz: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for CuffRunParams {
    fn default() -> Self {
        CuffRunParams {
            p_start: 180.0,
            deflation_rate: 3.0,
            map_true: 100.0,
            amp_max: 3.0,
            sigma: 15.0,
            heart_rate_hz: 1.2,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

impl CuffRunParams {
    pub fn validate(&self) -> Result<(), BiosimError> {
        let err = BiosimError::InvalidCuffRun;
        if !(self.p_start > self.map_true && self.map_true > 0.0) {
            return Err(err("need p_start > map_true > 0"));
        }
        if self.deflation_rate <= 0.0 {
            return Err(err("deflation_rate must be positive"));
        }
        // amp_max = 0 is allowed: it models a cuff with no oscillations.
        if self.amp_max < 0.0 {
            return Err(err("amp_max must be nonnegative"));
        }
        if self.sigma <= 0.0 {
            return Err(err("sigma must be positive"));
        }
        if !(0.5..=5.0).contains(&self.heart_rate_hz) {
            return Err(err("heart_rate_hz must lie in [0.5, 5]"));
        }
        if self.noise_sd < 0.0 {
            return Err(err("noise_sd must be nonnegative"));
        }
        Ok(())
    }

    /// Seconds until the cuff reaches the deflation floor.
    pub fn duration_s(&self) -> f64 {
        (self.p_start - DEFLATION_FLOOR_MMHG) / self.deflation_rate
    }

    pub fn trend(&self, t: f64) -> f64 {
        self.p_start - self.deflation_rate * t
    }

    /// Oscillation amplitude at cuff pressure `p`.
    pub fn envelope(&self, p: f64) -> f64 {
        let z = p - self.map_true;
        self.amp_max * (-(z * z) / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn oscillation(&self, t: f64) -> f64 {
        self.envelope(self.trend(t)) * (2.0 * PI * self.heart_rate_hz * t).sin()
    }

    pub fn noise(&self, t: f64) -> f64 {
        if self.noise_sd == 0.0 {
            return 0.0;
        }
        self.noise_sd * gaussian_at(self.seed, t)
    }

    /// Cuff pressure where the envelope falls to `ratio` of its peak, above MAP.
    pub fn high_side_crossing(&self, ratio: f64) -> f64 {
        self.map_true + self.sigma * (2.0 * (1.0 / ratio).ln()).sqrt()
    }

    pub fn low_side_crossing(&self, ratio: f64) -> f64 {
        self.map_true - self.sigma * (2.0 * (1.0 / ratio).ln()).sqrt()
    }

    pub fn sp_true(&self) -> f64 {
        self.high_side_crossing(crate::diagnostics::SYSTOLIC_RATIO)
    }

    pub fn dp_true(&self) -> f64 {
        self.low_side_crossing(crate::diagnostics::DIASTOLIC_RATIO)
    }

    pub fn hr_bpm_true(&self) -> f64 {
        self.heart_rate_hz * 60.0
    }
}

/// Measured cuff pressure `s(t) = p(t) + A(p(t))·sin(2π·hr·t) + noise`.
pub fn cuff_signal(params: &CuffRunParams, t: f64) -> f64 {
    debug_assert!(t >= 0.0 && t <= params.duration_s() + 1e-9);
    params.trend(t) + params.oscillation(t) + params.noise(t)
}

/// Standard normal draw keyed on `(seed, t)`, so noise is a pure function of time.
fn gaussian_at(seed: u64, t: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(t.to_bits())));
    StandardNormal.sample(&mut rng)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hearing thresholds in dB HL. A frequency that is absent is never heard.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HearingProfile {
    pub threshold_db: BTreeMap<u32, f64>,
}

impl HearingProfile {
    pub fn flat(threshold_db: f64, freqs: &[u32]) -> Self {
        HearingProfile { threshold_db: freqs.iter().map(|f| (*f, threshold_db)).collect() }
    }

    pub fn deaf() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), BiosimError> {
        for &db in self.threshold_db.values() {
            check_range("threshold_db", db, -10.0, 120.0)?;
        }
        Ok(())
    }
}

pub fn hearing_response(profile: &HearingProfile, freq: u32, level_db: f64) -> bool {
    profile.threshold_db.get(&freq).is_some_and(|t| level_db >= *t)
}

/// LM35 on the end of a probe.
#[derive(Debug, Clone)]
pub struct Lm35Module {
    pub temp_c: f64,
    pub constants: SensorConstants,
}

impl Lm35Module {
    pub fn new(temp_c: f64) -> Result<Self, BiosimError> {
        let constants = SensorConstants::default();
        lm35_voltage(temp_c, &constants)?;
        Ok(Lm35Module { temp_c, constants })
    }
}

impl VirtualModule for Lm35Module {
    fn name(&self) -> &str {
        "lm35"
    }

    fn voltage(&self, channel: Channel, _clock_ms: f64) -> Result<f64, ChannelUnavailable> {
        match channel {
            Channel::Raw => Ok(self.constants.lm35_slope * self.temp_c),
            Channel::Filtered => Err(ChannelUnavailable),
        }
    }
}

/// Volts per mmHg of the cuff module's analog band-pass output.
pub const FILTER_GAIN_V_PER_MMHG: f64 = 0.5;
/// Mid-rail bias of the analog band-pass output.
pub const FILTER_BIAS_V: f64 = 2.5;

/// Arm cuff on a pressure sensor, with a built-in analog band-pass output.
///
/// The raw channel follows [`cuff_signal`] until the deflation floor, then
/// the valve dumps and the cuff reads 0 mmHg.
#[derive(Debug, Clone)]
pub struct CuffModule {
    pub params: CuffRunParams,
    pub constants: SensorConstants,
}

impl CuffModule {
    pub fn new(params: CuffRunParams) -> Result<Self, BiosimError> {
        params.validate()?;
        Ok(CuffModule { params, constants: SensorConstants::default() })
    }
}

impl VirtualModule for CuffModule {
    fn name(&self) -> &str {
        "cuff"
    }

    fn has_filtered_channel(&self) -> bool {
        true
    }

    fn voltage(&self, channel: Channel, clock_ms: f64) -> Result<f64, ChannelUnavailable> {
        let t = clock_ms / 1000.0;
        let running = (0.0..=self.params.duration_s()).contains(&t);
        Ok(match (channel, running) {
            (Channel::Raw, true) => {
                let p = cuff_signal(&self.params, t).clamp(0.0, self.constants.mpx_max_mmhg());
                mpx_transfer(p, &self.constants)
            }
            (Channel::Raw, false) => mpx_transfer(0.0, &self.constants),
            (Channel::Filtered, true) => {
                let osc = self.params.oscillation(t) + self.params.noise(t);
                (FILTER_BIAS_V + FILTER_GAIN_V_PER_MMHG * osc).clamp(0.0, 5.0)
            }
            (Channel::Filtered, false) => FILTER_BIAS_V,
        })
    }
}

/// Load cell behind the instrumentation amplifier.
#[derive(Debug, Clone)]
pub struct LoadCellModule {
    pub weight_kg: f64,
    pub constants: SensorConstants,
}

impl LoadCellModule {
    pub fn new(weight_kg: f64) -> Result<Self, BiosimError> {
        let constants = SensorConstants::default();
        loadcell_voltage(weight_kg, &constants)?;
        Ok(LoadCellModule { weight_kg, constants })
    }
}

impl VirtualModule for LoadCellModule {
    fn name(&self) -> &str {
        "loadcell"
    }

    fn voltage(&self, channel: Channel, _clock_ms: f64) -> Result<f64, ChannelUnavailable> {
        match channel {
            Channel::Raw => Ok(self.weight_kg / self.constants.loadcell_capacity_kg
                * self.constants.loadcell_fullscale_volts()),
            Channel::Filtered => Err(ChannelUnavailable),
        }
    }
}

/// Slide pot carrying the movable lens of the eye-power tube.
#[derive(Debug, Clone)]
pub struct SlidePotModule {
    pub d: f64,
    pub pot: PotCalib,
}

impl SlidePotModule {
    pub fn new(d: f64, pot: PotCalib) -> Result<Self, BiosimError> {
        slidepot_voltage(d, &pot)?;
        Ok(SlidePotModule { d, pot })
    }
}

impl VirtualModule for SlidePotModule {
    fn name(&self) -> &str {
        "slidepot"
    }

    fn voltage(&self, channel: Channel, _clock_ms: f64) -> Result<f64, ChannelUnavailable> {
        match channel {
            Channel::Raw => Ok(5.0 * (self.d - self.pot.d_min) / (self.pot.d_max - self.pot.d_min)),
            Channel::Filtered => Err(ChannelUnavailable),
        }
    }
}
