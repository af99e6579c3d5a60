//! Measurement sessions: drive an emulated hub through a link, run the
//! diagnostics and produce a result ready to be saved.

mod bp;
mod link;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bp::{hampel, resample, BpConfig, BpOutcome, BpRun, BpSample, BpStats, Tick};
pub use link::{Attempt, Gate, HubLink, LinkStats};

use crate::biosim::{BiosimError, CuffModule, CuffRunParams, HearingProfile, LoadCellModule, Lm35Module, SlidePotModule};
use crate::diagnostics::{
    audiogram, eye_power, hearing_step, height_from_pixels, pot_to_distance, temperature_from_code, weight_from_code,
    Audiogram, AudiogramEntry, DiagnosticsError, HearingEvent, HearingState, HeightInput, LensBench, PotCalib,
    TemperatureCalib, TwoPointCalib,
};
use crate::hubsim::{Hub, HubAction, VirtualModule};
use crate::records::{Payload, TestKind};
use crate::wireproto::{EmulatedLink, HubCommand, LinkConfig};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("hub refused the command (safety cutoff engaged or module missing)")]
    HubRefused,
    #[error("no usable reply for {failed_ticks} consecutive polls")]
    LinkLost { failed_ticks: u32 },
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("invalid test parameters: {0}")]
    Params(#[from] BiosimError),
    #[error("another measurement session holds {0}")]
    Busy(PathBuf),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::HubRefused => "hub-refused",
            SessionError::LinkLost { .. } => "link-lost",
            SessionError::Diagnostics(e) => e.code(),
            SessionError::Params(_) => "invalid-params",
            SessionError::Busy(_) => "session-busy",
            SessionError::Io(_) => "io",
        }
    }
}

/// Simulated patient ground truth for one test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum TestSpec {
    Temperature {
        celsius: f64,
    },
    BloodPressure {
        #[serde(flatten)]
        cuff: CuffRunParams,
        #[serde(default)]
        analog_filter: bool,
    },
    Weight {
        kg: f64,
    },
    EyePower {
        distance_m: f64,
        #[serde(default)]
        bench: LensBench,
    },
    Hearing {
        profile: HearingProfile,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
    },
    Height(HeightInput),
}

pub const DEFAULT_HEARING_TIMEOUT_S: f64 = 3.0;
/// Time a simulated patient takes to press "heard".
pub const SIMULATED_RESPONSE_S: f64 = 0.8;

fn default_timeout_s() -> f64 {
    DEFAULT_HEARING_TIMEOUT_S
}

impl TestSpec {
    pub fn kind(&self) -> TestKind {
        match self {
            TestSpec::Temperature { .. } => TestKind::Temperature,
            TestSpec::BloodPressure { .. } => TestKind::BloodPressure,
            TestSpec::Weight { .. } => TestKind::Weight,
            TestSpec::EyePower { .. } => TestKind::EyePower,
            TestSpec::Hearing { .. } => TestKind::Hearing,
            TestSpec::Height(_) => TestKind::Height,
        }
    }

    /// The virtual module a hub-backed test needs.
    pub fn module(&self) -> Result<Option<Box<dyn VirtualModule>>, SessionError> {
        Ok(match self {
            TestSpec::Temperature { celsius } => Some(Box::new(Lm35Module::new(*celsius)?)),
            TestSpec::BloodPressure { cuff, .. } => Some(Box::new(CuffModule::new(cuff.clone())?)),
            TestSpec::Weight { kg } => Some(Box::new(LoadCellModule::new(*kg)?)),
            TestSpec::EyePower { distance_m, .. } => Some(Box::new(SlidePotModule::new(*distance_m, PotCalib::default())?)),
            TestSpec::Hearing { .. } | TestSpec::Height(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HearingOutcome {
    pub audiogram: Audiogram,
    pub steps: usize,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    Temperature { code: u16, celsius: f64, implausible: bool },
    BloodPressure(BpOutcome),
    Weight { code: u16, kg: f64, negative: bool },
    EyePower { code: u16, distance_m: f64, diopters: f64 },
    Hearing(HearingOutcome),
    Height { meters: f64 },
}

impl Measurement {
    pub fn kind(&self) -> TestKind {
        match self {
            Measurement::Temperature { .. } => TestKind::Temperature,
            Measurement::BloodPressure(_) => TestKind::BloodPressure,
            Measurement::Weight { .. } => TestKind::Weight,
            Measurement::EyePower { .. } => TestKind::EyePower,
            Measurement::Hearing(_) => TestKind::Hearing,
            Measurement::Height { .. } => TestKind::Height,
        }
    }

    pub fn payload(&self) -> Payload {
        let scalar = |v: f64| Payload::scalar(self.kind(), v).expect("scalar kind");
        match self {
            Measurement::Temperature { celsius, .. } => scalar(*celsius),
            Measurement::BloodPressure(o) => Payload::BloodPressure(o.result),
            Measurement::Weight { kg, .. } => scalar(*kg),
            Measurement::EyePower { diopters, .. } => scalar(*diopters),
            Measurement::Hearing(h) => Payload::Hearing(h.audiogram.clone()),
            Measurement::Height { meters } => scalar(*meters),
        }
    }

    /// Named numeric results, for checking against expectations.
    pub fn fields(&self) -> Vec<(String, f64)> {
        let f = |k: &str, v: f64| (k.to_owned(), v);
        match self {
            Measurement::Temperature { celsius, .. } => vec![f("celsius", *celsius)],
            Measurement::BloodPressure(o) => vec![
                f("systolic", o.result.systolic),
                f("diastolic", o.result.diastolic),
                f("map", o.result.map),
                f("heart_rate", o.result.heart_rate),
            ],
            Measurement::Weight { kg, .. } => vec![f("kg", *kg)],
            Measurement::EyePower { distance_m, diopters, .. } => vec![f("diopters", *diopters), f("distance_m", *distance_m)],
            Measurement::Hearing(h) => h
                .audiogram
                .entries
                .iter()
                .filter_map(|(hz, e)| e.db().map(|db| (format!("db_{hz}"), f64::from(db))))
                .collect(),
            Measurement::Height { meters } => vec![f("meters", *meters)],
        }
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        match self {
            Measurement::Temperature { celsius, implausible, .. } => {
                format!("temperature {celsius:.2} °C{}", if *implausible { " (implausible)" } else { "" })
            }
            Measurement::BloodPressure(o) => format!(
                "blood pressure {:.1}/{:.1} mmHg, MAP {:.1}, heart rate {:.1} bpm",
                o.result.systolic, o.result.diastolic, o.result.map, o.result.heart_rate
            ),
            Measurement::Weight { kg, negative, .. } => {
                format!("weight {kg:.2} kg{}", if *negative { " (negative, re-tare the scale)" } else { "" })
            }
            Measurement::EyePower { distance_m, diopters, .. } => {
                format!("eye power {diopters:.2} D at {:.2} cm", distance_m * 100.0)
            }
            Measurement::Hearing(h) => {
                let cells: Vec<String> = h
                    .audiogram
                    .entries
                    .iter()
                    .map(|(hz, e)| match e {
                        AudiogramEntry::Threshold(db) => format!("{hz} Hz {db} dB"),
                        AudiogramEntry::NoResponse => format!("{hz} Hz NR"),
                    })
                    .collect();
                format!("hearing {}", cells.join(", "))
            }
            Measurement::Height { meters } => format!("height {meters:.3} m"),
        }
    }
}

/// Link and hub settings for one test.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub link: LinkConfig,
    /// Leave the cutoff engaged; the hub refuses to sample.
    pub safety_off: bool,
    pub bp: BpConfig,
    pub temperature: TemperatureCalib,
    pub weight: TwoPointCalib,
    pub pot: PotCalib,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            link: LinkConfig::wired(),
            safety_off: false,
            bp: BpConfig::default(),
            temperature: TemperatureCalib::default(),
            weight: TwoPointCalib::default(),
            pot: PotCalib::default(),
        }
    }
}

/// Attempts for a single-value reading.
pub const SINGLE_READ_ATTEMPTS: u32 = 3;

pub fn open_hub(module: Box<dyn VirtualModule>, opts: &RunOptions) -> HubLink<EmulatedLink<Hub>> {
    let mut hub = Hub::with_module(module);
    if opts.safety_off {
        hub.state.configure(HubAction::SafetyOff).expect("opening the cutoff never fails");
    }
    HubLink::new(EmulatedLink::new(hub, opts.link.clone()))
}

fn read_once(link: &mut HubLink<EmulatedLink<Hub>>) -> Result<u16, SessionError> {
    link.sample(HubCommand::SampleRaw, SINGLE_READ_ATTEMPTS)?
        .map(|(code, _)| code)
        .ok_or(SessionError::LinkLost { failed_ticks: 1 })
}

/// Run one test end to end against an emulated hub.
pub fn run_test(spec: &TestSpec, opts: &RunOptions) -> Result<Measurement, SessionError> {
    let single_read = || -> Result<u16, SessionError> {
        let module = spec.module()?.expect("hub-backed test");
        read_once(&mut open_hub(module, opts))
    };
    Ok(match spec {
        TestSpec::Temperature { .. } => {
            let code = single_read()?;
            let r = temperature_from_code(code, &opts.temperature)?;
            Measurement::Temperature { code, celsius: r.celsius, implausible: r.implausible }
        }
        TestSpec::Weight { .. } => {
            let code = single_read()?;
            let r = weight_from_code(code, &opts.weight)?;
            Measurement::Weight { code, kg: r.kg, negative: r.negative }
        }
        TestSpec::EyePower { bench, .. } => eye_power_from_code(single_read()?, bench, &opts.pot)?,
        TestSpec::BloodPressure { cuff, analog_filter } => {
            let cfg = BpConfig { analog_filter: *analog_filter || opts.bp.analog_filter, ..opts.bp };
            let module = CuffModule::new(cuff.clone())?;
            let mut run = BpRun::new(open_hub(Box::new(module), opts), cfg);
            run.run_to_end()?;
            Measurement::BloodPressure(run.finish()?)
        }
        TestSpec::Hearing { profile, timeout_s } => Measurement::Hearing(run_hearing(profile, *timeout_s)?),
        TestSpec::Height(input) => Measurement::Height { meters: height_from_pixels(input)? },
    })
}

pub fn eye_power_from_code(code: u16, bench: &LensBench, pot: &PotCalib) -> Result<Measurement, SessionError> {
    if !bench.is_valid() {
        return Err(DiagnosticsError::InvalidCalibration("lens bench geometry must be positive and finite").into());
    }
    let distance_m = pot_to_distance(code, pot)?;
    Ok(Measurement::EyePower { code, distance_m, diopters: eye_power(distance_m, bench) })
}

/// Sweep against a simulated patient who answers after
/// [`SIMULATED_RESPONSE_S`] when the tone is at or above threshold and
/// otherwise lets the presentation time out.
pub fn run_hearing(profile: &HearingProfile, timeout_s: f64) -> Result<HearingOutcome, SessionError> {
    profile.validate()?;
    let mut state = HearingState::new();
    let mut elapsed_s = 0.0;
    while let Some((hz, db)) = state.current() {
        let heard = crate::biosim::hearing_response(profile, hz, f64::from(db));
        let (event, wait) = if heard { (HearingEvent::Heard, SIMULATED_RESPONSE_S.min(timeout_s)) } else { (HearingEvent::Timeout, timeout_s) };
        elapsed_s += wait;
        state = hearing_step(state, event)?;
    }
    Ok(HearingOutcome { audiogram: audiogram(&state)?, steps: state.steps, elapsed_s })
}

/// Exclusive claim on the hub, shared by the CLI and the gateway through a
/// lock file next to the store.
#[derive(Debug)]
pub struct SessionLock {
    path: PathBuf,
}

impl SessionLock {
    pub fn path_for(store: &Path) -> PathBuf {
        let mut name = store.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".session.lock");
        store.with_file_name(name)
    }

    pub fn acquire(path: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let path = path.into();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(SessionLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SessionError::Busy(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
