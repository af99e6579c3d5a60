//! The `umphcs` operator command line.
//!
//! Every failure prints exactly one line `{"error":{"code":..,"message":..}}`
//! on standard error and exits nonzero.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::advice::{AdviceError, AdviceRules};
use crate::diagnostics::SWEEP_FREQUENCIES;
use crate::gateway::{GatewayConfig, GatewayError, GatewayHandle};
use crate::records::{to_canonical, Payload, RecordStore, RecordsError, ScreeningConfig, TestKind};
use crate::scenario::{run_scenario, Scenario, ScenarioError};
use crate::session::{run_test, RunOptions, SessionError, SessionLock, TestSpec};
use crate::sync::{client_sync, resolve_endpoint, ServerStore, SyncError, SyncServer};
use crate::wireproto::{FaultProfile, LinkConfig, LinkKind};

pub const STORE_ENV: &str = "UMPHCS_STORE";

#[derive(Debug, Parser)]
#[command(name = "umphcs", version, about = "Public health kiosk: emulated sensor hub, diagnostics, records and sync")]
struct Cli {
    /// Record store file.
    #[arg(long, global = true, env = STORE_ENV, default_value = "umphcs.jsonl")]
    store: PathBuf,
    /// Advice rule file replacing the built-in rules.
    #[arg(long, global = true)]
    advice: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Manage patients.
    #[command(subcommand)]
    Patient(PatientCmd),
    /// Run one test against the emulated hub and save the record.
    Measure(MeasureArgs),
    /// Trend screening.
    #[command(subcommand)]
    Screen(ScreenCmd),
    /// Upload unsynced records.
    #[command(subcommand)]
    Sync(SyncCmd),
    /// Run the sync server or the console gateway.
    #[command(subcommand)]
    Serve(ServeCmd),
    /// Replay a scenario file.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Hearing results.
    #[command(subcommand)]
    Audiogram(AudiogramCmd),
}

#[derive(Debug, Subcommand)]
enum PatientCmd {
    Add {
        patient_id: String,
        #[arg(long)]
        name: String,
        #[arg(long)]
        region: String,
    },
    List,
}

#[derive(Debug, Args)]
struct MeasureArgs {
    /// temperature, blood-pressure, weight, eye-power, hearing or height.
    kind: TestKind,
    #[arg(long)]
    patient: String,
    #[arg(long, default_value = "wired")]
    transport: LinkKind,
    /// Seeds cuff noise and link faults.
    #[arg(long)]
    seed: Option<u64>,
    /// Leave the hub's safety cutoff engaged.
    #[arg(long)]
    safety_off: bool,
    /// Ground truth as a JSON object, merged under the flags below.
    #[arg(long)]
    params: Option<String>,
    #[arg(long)]
    celsius: Option<f64>,
    #[arg(long)]
    kg: Option<f64>,
    #[arg(long)]
    distance_m: Option<f64>,
    #[arg(long)]
    map: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    heart_rate_hz: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Read the hardware-filtered oscillation channel.
    #[arg(long)]
    analog: bool,
    /// Flat hearing threshold across the sweep.
    #[arg(long)]
    threshold_db: Option<f64>,
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long)]
    corrupt_prob: Option<f64>,
    #[arg(long)]
    latency_ms: Option<f64>,
    /// Print the result as one canonical JSON line.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum ScreenCmd {
    Weight { patient_id: String },
    Region { region: String },
}

#[derive(Debug, Subcommand)]
enum SyncCmd {
    Run {
        /// host:port; defaults to $UMPHCS_SYNC_ENDPOINT.
        #[arg(long)]
        endpoint: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum ServeCmd {
    Sync {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Server log file; in memory when absent.
        #[arg(long)]
        server_store: Option<PathBuf>,
    },
    Gateway {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long, default_value = "wired")]
        transport: LinkKind,
    },
}

#[derive(Debug, Subcommand)]
enum ScenarioCmd {
    Run { file: PathBuf },
}

#[derive(Debug, Subcommand)]
enum AudiogramCmd {
    Show { record_id: String },
}

#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        CliError { code: code.into(), message: message.into() }
    }

    pub fn to_line(&self) -> String {
        to_canonical(&json!({ "error": { "code": self.code, "message": self.message } }))
    }
}

macro_rules! from_coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.code(), e.to_string())
            }
        }
    )*};
}
from_coded!(RecordsError, SessionError, SyncError, ScenarioError, GatewayError);

impl From<AdviceError> for CliError {
    fn from(e: AdviceError) -> Self {
        CliError::new("advice-rules", e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("Io", e.to_string())
    }
}

/// Entry point for the binary; returns the exit status.
pub fn main() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("{}", CliError::new("usage", first).to_line());
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_line());
            1
        }
    }
}

fn rules(path: Option<&Path>) -> Result<AdviceRules, CliError> {
    Ok(match path {
        Some(p) => AdviceRules::load(p)?,
        None => AdviceRules::default(),
    })
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Patient(PatientCmd::Add { patient_id, name, region }) => {
            let mut store = RecordStore::open(&cli.store)?;
            let p = store.add_patient(&patient_id, &name, &region)?;
            println!("{}", p.to_line());
        }
        Command::Patient(PatientCmd::List) => {
            let store = RecordStore::open(&cli.store)?;
            for p in store.index().patients() {
                println!("{}", p.to_line());
            }
        }
        Command::Measure(args) => measure(&cli.store, &rules(cli.advice.as_deref())?, args)?,
        Command::Screen(ScreenCmd::Weight { patient_id }) => {
            let store = RecordStore::open(&cli.store)?;
            match store.screen_patient(&patient_id, &ScreeningConfig::default())? {
                Some(flag) => println!("{}", to_canonical(&flag)),
                None => println!("{}", to_canonical(&json!({ "patient_id": patient_id, "flagged": false }))),
            }
        }
        Command::Screen(ScreenCmd::Region { region }) => {
            let store = RecordStore::open(&cli.store)?;
            match store.screen_region(&region, &ScreeningConfig::default()) {
                Some(alert) => println!("{}", to_canonical(&alert)),
                None => println!("{}", to_canonical(&json!({ "region": region, "flagged": 0 }))),
            }
        }
        Command::Sync(SyncCmd::Run { endpoint }) => {
            let endpoint = resolve_endpoint(endpoint.as_deref())?;
            let mut store = RecordStore::open(&cli.store)?;
            let summary = client_sync(&mut store, &endpoint)?;
            println!("{}", to_canonical(&summary));
        }
        Command::Serve(ServeCmd::Sync { port, bind, server_store }) => {
            let store = match server_store {
                Some(p) => ServerStore::open(p)?,
                None => ServerStore::in_memory(),
            };
            let server = SyncServer::bind((bind.as_str(), port), store)?;
            println!("sync server listening on {}", server.local_addr());
            server.wait();
        }
        Command::Serve(ServeCmd::Gateway { port, bind, speed, transport }) => {
            if !(speed.is_finite() && speed > 0.0) {
                return Err(CliError::new("invalid-params", "speed must be positive"));
            }
            let mut cfg = GatewayConfig::new(&cli.store);
            cfg.speed = speed;
            cfg.transport = transport;
            cfg.rules = rules(cli.advice.as_deref())?;
            let handle = GatewayHandle::spawn((bind.as_str(), port), cfg)?;
            println!("gateway listening on {}", handle.local_addr());
            handle.wait();
        }
        Command::Scenario(ScenarioCmd::Run { file }) => {
            let scenario = Scenario::load(&file)?;
            let rules = rules(cli.advice.as_deref())?;
            let _lock = SessionLock::acquire(SessionLock::path_for(&cli.store))?;
            let mut store = scenario.open_store(&cli.store)?;
            let report = run_scenario(&scenario, &mut store, &rules)?;
            print!("{}", report.render());
            if !report.passed() {
                let s = &report.summary;
                return Err(CliError::new("scenario-failed", format!("{} of {} tests failed", s.failed, s.tests)));
            }
        }
        Command::Audiogram(AudiogramCmd::Show { record_id }) => {
            let store = RecordStore::open(&cli.store)?;
            let record = store
                .index()
                .record(&record_id)
                .ok_or_else(|| CliError::new("UnknownRecord", format!("no record {record_id:?}")))?;
            let Payload::Hearing(gram) = &record.payload else {
                return Err(CliError::new("not-hearing", format!("record {record_id} is a {} test", record.kind)));
            };
            print!("{}", gram.render_text());
        }
    }
    Ok(())
}

fn set(params: &mut Map<String, Value>, key: &str, v: Option<impl Into<Value>>) {
    if let Some(v) = v {
        params.insert(key.into(), v.into());
    }
}

/// Defaults, then `--params`, then the individual flags.
fn build_spec(a: &MeasureArgs) -> Result<TestSpec, CliError> {
    let mut params = match a.kind {
        TestKind::Temperature => json!({ "celsius": 37.0 }),
        TestKind::Weight => json!({ "kg": 60.0 }),
        TestKind::EyePower => json!({ "distance_m": 0.03 }),
        TestKind::Hearing => json!({ "profile": flat_profile(30.0) }),
        TestKind::BloodPressure | TestKind::Height => json!({}),
    };
    let Value::Object(p) = &mut params else { unreachable!() };
    if let Some(text) = &a.params {
        match serde_json::from_str(text) {
            Ok(Value::Object(extra)) => p.extend(extra),
            Ok(_) => return Err(CliError::new("invalid-params", "--params must be a JSON object")),
            Err(e) => return Err(CliError::new("invalid-params", format!("--params: {e}"))),
        }
    }
    set(p, "celsius", a.celsius);
    set(p, "kg", a.kg);
    set(p, "distance_m", a.distance_m);
    if a.kind == TestKind::BloodPressure {
        set(p, "map_true", a.map);
        set(p, "sigma", a.sigma);
        set(p, "heart_rate_hz", a.heart_rate_hz);
        set(p, "noise_sd", a.noise_sd);
        set(p, "seed", a.seed);
        if a.analog {
            p.insert("analog_filter".into(), true.into());
        }
    }
    if let Some(db) = a.threshold_db {
        p.insert("profile".into(), flat_profile(db));
    }
    serde_json::from_value(json!({ "kind": a.kind, "params": params }))
        .map_err(|e| CliError::new("invalid-params", format!("{} parameters: {e}", a.kind)))
}

fn flat_profile(db: f64) -> Value {
    Value::Object(SWEEP_FREQUENCIES.iter().map(|f| (f.to_string(), db.into())).collect())
}

fn link_config(a: &MeasureArgs) -> Result<LinkConfig, CliError> {
    let link = LinkConfig::for_kind(a.transport);
    if a.drop_prob.is_none() && a.corrupt_prob.is_none() && a.latency_ms.is_none() {
        return Ok(link);
    }
    let faults = FaultProfile {
        drop_prob: a.drop_prob.unwrap_or(0.0),
        corrupt_prob: a.corrupt_prob.unwrap_or(0.0),
        seed: a.seed.unwrap_or(0),
        latency_ms: a.latency_ms.unwrap_or(0.0),
    };
    faults.validate().map_err(|e| CliError::new("invalid-params", e.to_string()))?;
    Ok(link.with_faults(faults))
}

fn measure(store_path: &Path, rules: &AdviceRules, a: MeasureArgs) -> Result<(), CliError> {
    let spec = build_spec(&a)?;
    let opts = RunOptions { link: link_config(&a)?, safety_off: a.safety_off, ..RunOptions::default() };
    let _lock = SessionLock::acquire(SessionLock::path_for(store_path))?;
    let mut store = RecordStore::open(store_path)?;
    if store.index().patient(&a.patient).is_none() {
        return Err(RecordsError::UnknownPatient(a.patient).into());
    }
    let m = run_test(&spec, &opts)?;
    let record = store.record(&a.patient, "cli", m.kind(), m.payload())?;
    let trend = store.screen_patient(&a.patient, &ScreeningConfig::default())?;
    let advice = rules.evaluate(m.kind(), &m.fields(), trend.as_ref());
    if a.json {
        let out = json!({
            "record_id": record.record_id,
            "patient": a.patient,
            "kind": m.kind(),
            "result": m.payload().to_value(),
            "summary": m.summary(),
            "advice": advice,
        });
        println!("{}", to_canonical(&out));
    } else {
        println!("{} {}: {}", record.record_id, m.kind(), m.summary());
        if let Payload::Hearing(gram) = &record.payload {
            print!("{}", gram.render_text());
        }
        for adv in &advice {
            println!("advice [{}]: {}", adv.id, adv.text);
        }
    }
    Ok(())
}
