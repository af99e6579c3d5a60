//! HTTP gateway for the operator console: the patient list, one live
//! session at a time, and a server-sent event stream of the running test.
//!
//! | method | path                    | body                               |
//! |--------|-------------------------|------------------------------------|
//! | GET    | `/patients`             |                                    |
//! | POST   | `/session/start`        | `{patient, test, params?}`         |
//! | POST   | `/session/hearing/event`| `{heard}`                          |
//! | POST   | `/session/pot`          | `{code}`                           |
//! | POST   | `/session/stop`         |                                    |
//! | GET    | `/session/result`       |                                    |
//! | GET    | `/session/stream`       | server-sent events                 |
//!
//! Requests that need a running session get 409 when there is none.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot};

use crate::advice::{Advice, AdviceRules};
use crate::biosim::CuffModule;
use crate::diagnostics::{audiogram, hearing_step, HearingEvent, HearingState, LensBench, PotCalib};
use crate::records::{to_canonical, RecordStore, RecordsError, ScreeningConfig, TestKind};
use crate::session::{
    eye_power_from_code, open_hub, run_test, BpConfig, BpRun, HearingOutcome, Measurement, RunOptions, SessionError,
    SessionLock, TestSpec, Tick, DEFAULT_HEARING_TIMEOUT_S,
};
use crate::wireproto::{LinkConfig, LinkKind};

/// BP samples arrive every 10 ms of simulated time; every fifth one is
/// streamed, 20 per simulated second.
const BP_EMIT_EVERY: u64 = 5;
const STOP_WAIT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub store: PathBuf,
    pub device_id: String,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    pub hearing_timeout_s: f64,
    pub transport: LinkKind,
    pub rules: AdviceRules,
}

impl GatewayConfig {
    pub fn new(store: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            store: store.into(),
            device_id: "gateway".into(),
            speed: 1.0,
            hearing_timeout_s: DEFAULT_HEARING_TIMEOUT_S,
            transport: LinkKind::Wired,
            rules: AdviceRules::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Phase {
    Running,
    Done,
    Error,
}

#[derive(Debug, Clone, Serialize)]
struct ErrorBody {
    code: String,
    message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct Tone {
    freq_hz: u32,
    level_db: i32,
}

/// What `/session/result` reports.
#[derive(Debug, Clone, Serialize)]
struct SessionView {
    session: u64,
    patient: String,
    kind: TestKind,
    state: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    tone: Option<Tone>,
    #[serde(skip_serializing_if = "Option::is_none")]
    record_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    advice: Vec<Advice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<ErrorBody>,
}

enum Live {
    Idle,
    Bp { stop: Arc<AtomicBool> },
    Hearing { state: HearingState, generation: u64 },
    EyePower { bench: LensBench, last: Option<Measurement> },
}

struct Session {
    view: SessionView,
    live: Live,
    _lock: Option<SessionLock>,
}

#[derive(Debug, Clone)]
struct StreamEvent {
    name: &'static str,
    data: String,
}

struct Shared {
    cfg: GatewayConfig,
    store: Mutex<RecordStore>,
    session: Mutex<Option<Session>>,
    events: broadcast::Sender<StreamEvent>,
    next_id: AtomicU64,
}

type App = Arc<Shared>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Shared {
    fn emit(&self, name: &'static str, data: &impl Serialize) {
        // No subscribers is fine.
        let _ = self.events.send(StreamEvent { name, data: to_canonical(data) });
    }

    fn running(&self) -> bool {
        lock(&self.session).as_ref().is_some_and(|s| s.view.state == Phase::Running)
    }

    /// Close session `id` with its outcome, saving the record on success.
    fn complete(&self, id: u64, outcome: Result<Measurement, SessionError>) {
        let mut guard = lock(&self.session);
        let Some(s) = guard.as_mut().filter(|s| s.view.session == id && s.view.state == Phase::Running) else {
            return;
        };
        match outcome.map_err(|e| ErrorBody { code: e.code().into(), message: e.to_string() }).and_then(|m| self.save(&s.view.patient, m)) {
            Ok((record_id, m, advice)) => {
                s.view.state = Phase::Done;
                s.view.record_id = Some(record_id);
                s.view.result = Some(m.payload().to_value());
                s.view.summary = Some(m.summary());
                s.view.advice = advice;
            }
            Err(e) => {
                s.view.state = Phase::Error;
                s.view.error = Some(e);
            }
        }
        s.view.tone = None;
        s.live = Live::Idle;
        s._lock = None;
        self.emit("result", &s.view);
    }

    fn save(&self, patient: &str, m: Measurement) -> Result<(String, Measurement, Vec<Advice>), ErrorBody> {
        let as_body = |e: RecordsError| ErrorBody { code: e.code().into(), message: e.to_string() };
        let mut store = lock(&self.store);
        let record = store.record(patient, &self.cfg.device_id, m.kind(), m.payload()).map_err(as_body)?;
        let trend = store.screen_patient(patient, &ScreeningConfig::default()).map_err(as_body)?;
        let advice = self.cfg.rules.evaluate(m.kind(), &m.fields(), trend.as_ref());
        Ok((record.record_id, m, advice))
    }
}

fn json_response(status: StatusCode, body: &impl Serialize) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], to_canonical(body)).into_response()
}

fn error_response(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    json_response(status, &json!({ "error": { "code": code, "message": message.into() } }))
}

fn no_session() -> Response {
    error_response(StatusCode::CONFLICT, "no-session", "no active session")
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error_response(StatusCode::BAD_REQUEST, "malformed-request", e.to_string()))
}

async fn patients(State(app): State<App>) -> Response {
    let store = lock(&app.store);
    let list: Vec<_> = store.index().patients().cloned().collect();
    json_response(StatusCode::OK, &list)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartRequest {
    patient: String,
    test: TestKind,
    #[serde(default)]
    params: Option<Value>,
    #[serde(default)]
    transport: Option<LinkKind>,
}

async fn start(State(app): State<App>, body: Bytes) -> Response {
    let req: StartRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if app.running() {
        return error_response(StatusCode::CONFLICT, "session-busy", "a session is already running");
    }
    if lock(&app.store).index().patient(&req.patient).is_none() {
        return error_response(StatusCode::NOT_FOUND, "UnknownPatient", format!("unknown patient {:?}", req.patient));
    }
    let params = req.params.clone().unwrap_or_else(|| json!({}));
    let live = match req.test {
        TestKind::Hearing => {
            let state = HearingState::new();
            Live::Hearing { state, generation: 0 }
        }
        TestKind::EyePower => {
            #[derive(Deserialize, Default)]
            #[serde(deny_unknown_fields)]
            struct EyeParams {
                #[serde(default)]
                bench: LensBench,
            }
            match serde_json::from_value::<EyeParams>(params.clone()) {
                Ok(p) if p.bench.is_valid() => Live::EyePower { bench: p.bench, last: None },
                Ok(_) => return error_response(StatusCode::BAD_REQUEST, "invalid-params", "lens bench geometry must be positive"),
                Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid-params", e.to_string()),
            }
        }
        _ => Live::Idle,
    };
    let spec = match req.test {
        TestKind::Hearing | TestKind::EyePower => None,
        kind => match serde_json::from_value::<TestSpec>(json!({ "kind": kind, "params": params })) {
            Ok(s) => Some(s),
            Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid-params", e.to_string()),
        },
    };
    let session_lock = match SessionLock::acquire(SessionLock::path_for(&app.cfg.store)) {
        Ok(l) => l,
        Err(e) => return error_response(StatusCode::CONFLICT, e.code(), e.to_string()),
    };

    let id = app.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    let mut view = SessionView {
        session: id,
        patient: req.patient.clone(),
        kind: req.test,
        state: Phase::Running,
        tone: None,
        record_id: None,
        result: None,
        summary: None,
        advice: Vec::new(),
        error: None,
    };
    let opts = RunOptions { link: LinkConfig::for_kind(req.transport.unwrap_or(app.cfg.transport)), ..RunOptions::default() };
    let stop = Arc::new(AtomicBool::new(false));
    let live = match (&spec, live) {
        (Some(TestSpec::BloodPressure { .. }), _) => Live::Bp { stop: stop.clone() },
        (_, Live::Hearing { state, generation }) => {
            view.tone = state.current().map(|(freq_hz, level_db)| Tone { freq_hz, level_db });
            Live::Hearing { state, generation }
        }
        (_, other) => other,
    };
    {
        let mut guard = lock(&app.session);
        // Re-check under the lock; a racing start may have won.
        if guard.as_ref().is_some_and(|s| s.view.state == Phase::Running) {
            return error_response(StatusCode::CONFLICT, "session-busy", "a session is already running");
        }
        *guard = Some(Session { view: view.clone(), live, _lock: Some(session_lock) });
    }

    match spec {
        Some(TestSpec::BloodPressure { cuff, analog_filter }) => {
            let app2 = app.clone();
            let cfg = BpConfig { analog_filter, ..BpConfig::default() };
            std::thread::spawn(move || run_bp(app2, id, cuff, cfg, opts, stop));
        }
        Some(spec) => {
            let outcome = tokio::task::spawn_blocking(move || run_test(&spec, &opts))
                .await
                .unwrap_or_else(|e| Err(SessionError::Io(std::io::Error::other(e.to_string()))));
            app.complete(id, outcome);
        }
        None => {
            if let Some(t) = view.tone {
                app.emit("tone", &json!({ "freq_hz": t.freq_hz, "level_db": t.level_db, "state": "presenting" }));
                schedule_timeout(app.clone(), id, 0);
            }
        }
    }
    result_response(&app)
}

fn run_bp(app: App, id: u64, cuff: crate::biosim::CuffRunParams, cfg: BpConfig, opts: RunOptions, stop: Arc<AtomicBool>) {
    let module = match CuffModule::new(cuff) {
        Ok(m) => m,
        Err(e) => return app.complete(id, Err(e.into())),
    };
    let mut run = BpRun::new(open_hub(Box::new(module), &opts), cfg);
    let started = Instant::now();
    let mut n = 0u64;
    loop {
        if stop.load(Ordering::Relaxed) {
            run.stop();
        }
        match run.step() {
            Ok(Tick::Done) => break,
            Ok(Tick::Sample(s)) => {
                n += 1;
                if n % BP_EMIT_EVERY == 0 {
                    app.emit("sample", &json!({ "t_s": s.t_s, "cuff_mmHg": s.cuff_mmhg, "ow": s.ow }));
                }
            }
            Ok(Tick::Missed) => {}
            Err(e) => return app.complete(id, Err(e)),
        }
        let target = Duration::from_secs_f64(run.elapsed_s() / app.cfg.speed);
        let real = started.elapsed();
        if target > real && !stop.load(Ordering::Relaxed) {
            std::thread::sleep(target - real);
        }
    }
    app.complete(id, run.finish().map(Measurement::BloodPressure));
}

/// After the timeout with no response at this presentation, count it as
/// not heard.
fn schedule_timeout(app: App, id: u64, generation: u64) {
    let wait = Duration::from_secs_f64(app.cfg.hearing_timeout_s / app.cfg.speed);
    tokio::spawn(async move {
        tokio::time::sleep(wait).await;
        let _ = hearing_input(&app, id, Some(generation), HearingEvent::Timeout);
    });
}

/// Apply one response to the running sweep. `generation` pins a timeout to
/// the presentation it was armed for.
fn hearing_input(app: &App, id: u64, generation: Option<u64>, event: HearingEvent) -> Result<(), ()> {
    let mut guard = lock(&app.session);
    let Some(s) = guard.as_mut().filter(|s| s.view.session == id && s.view.state == Phase::Running) else {
        return Err(());
    };
    let Live::Hearing { state, generation: current } = &mut s.live else {
        return Err(());
    };
    if generation.is_some_and(|g| g != *current) {
        return Ok(());
    }
    let next = hearing_step(state.clone(), event).map_err(|_| ())?;
    *state = next.clone();
    *current += 1;
    let gen = *current;
    match next.current() {
        Some((freq_hz, level_db)) => {
            s.view.tone = Some(Tone { freq_hz, level_db });
            app.emit("tone", &json!({ "freq_hz": freq_hz, "level_db": level_db, "state": "presenting" }));
            drop(guard);
            schedule_timeout(app.clone(), id, gen);
        }
        None => {
            drop(guard);
            let outcome = audiogram(&next)
                .map(|gram| Measurement::Hearing(HearingOutcome { audiogram: gram, steps: next.steps, elapsed_s: 0.0 }))
                .map_err(SessionError::from);
            app.complete(id, outcome);
        }
    }
    Ok(())
}

fn current_id(app: &App, kind: TestKind) -> Option<u64> {
    lock(&app.session)
        .as_ref()
        .filter(|s| s.view.state == Phase::Running && s.view.kind == kind)
        .map(|s| s.view.session)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HearingRequest {
    heard: bool,
}

async fn hearing_event(State(app): State<App>, body: Bytes) -> Response {
    let req: HearingRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let Some(id) = current_id(&app, TestKind::Hearing) else {
        return no_session();
    };
    let event = if req.heard { HearingEvent::Heard } else { HearingEvent::NotHeard };
    if hearing_input(&app, id, None, event).is_err() {
        return no_session();
    }
    result_response(&app)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PotRequest {
    code: u16,
}

async fn pot(State(app): State<App>, body: Bytes) -> Response {
    let req: PotRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let mut guard = lock(&app.session);
    let Some(s) = guard.as_mut().filter(|s| s.view.state == Phase::Running) else {
        return no_session();
    };
    let Live::EyePower { bench, last } = &mut s.live else {
        return no_session();
    };
    match eye_power_from_code(req.code, bench, &PotCalib::default()) {
        Ok(m) => {
            let Measurement::EyePower { code, distance_m, diopters } = m else { unreachable!() };
            let body = json!({ "code": code, "distance_m": distance_m, "diopters": diopters });
            *last = Some(m);
            app.emit("pot", &body);
            json_response(StatusCode::OK, &body)
        }
        Err(e) => error_response(StatusCode::BAD_REQUEST, e.code(), e.to_string()),
    }
}

async fn stop(State(app): State<App>) -> Response {
    let (id, action) = {
        let mut guard = lock(&app.session);
        let Some(s) = guard.as_mut().filter(|s| s.view.state == Phase::Running) else {
            return no_session();
        };
        let id = s.view.session;
        match &mut s.live {
            Live::Bp { stop } => {
                stop.store(true, Ordering::Relaxed);
                (id, None)
            }
            Live::EyePower { last, .. } => match last.take() {
                Some(m) => (id, Some(Ok(m))),
                None => return error_response(StatusCode::CONFLICT, "no-reading", "move the slider before recording"),
            },
            Live::Hearing { .. } => (id, Some(Err(SessionError::Diagnostics(crate::diagnostics::DiagnosticsError::NotFinished)))),
            Live::Idle => (id, None),
        }
    };
    if let Some(outcome) = action {
        app.complete(id, outcome);
    }
    let deadline = Instant::now() + STOP_WAIT;
    while app.running() && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    result_response(&app)
}

fn result_response(app: &App) -> Response {
    match lock(&app.session).as_ref() {
        Some(s) => json_response(StatusCode::OK, &s.view),
        None => no_session(),
    }
}

async fn result(State(app): State<App>) -> Response {
    result_response(&app)
}

async fn stream(State(app): State<App>) -> Sse<impl futures::Stream<Item = Result<Event, Infallible>>> {
    let rx = app.events.subscribe();
    let events = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => return Some((Ok(Event::default().event(ev.name).data(ev.data)), rx)),
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}

pub fn router(cfg: GatewayConfig) -> Result<Router, RecordsError> {
    let store = RecordStore::open(&cfg.store)?;
    let (events, _) = broadcast::channel(1024);
    let app = Arc::new(Shared { cfg, store: Mutex::new(store), session: Mutex::new(None), events, next_id: AtomicU64::new(0) });
    Ok(Router::new()
        .route("/patients", get(patients))
        .route("/session/start", post(start))
        .route("/session/hearing/event", post(hearing_event))
        .route("/session/pot", post(pot))
        .route("/session/stop", post(stop))
        .route("/session/result", get(result))
        .route("/session/stream", get(stream))
        .with_state(app))
}

/// A gateway serving on its own runtime thread.
pub struct GatewayHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error(transparent)]
    Records(#[from] RecordsError),
    #[error("gateway: {0}")]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Records(e) => e.code(),
            GatewayError::Io(_) => "io",
        }
    }
}

impl GatewayHandle {
    pub fn spawn(addr: impl std::net::ToSocketAddrs, cfg: GatewayConfig) -> Result<Self, GatewayError> {
        let app = router(cfg)?;
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let (tx, rx) = oneshot::channel();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => return log::error!("gateway listener: {e}"),
                };
                tokio::select! {
                    r = axum::serve(listener, app) => if let Err(e) = r { log::error!("gateway: {e}") },
                    _ = rx => {}
                }
            });
        });
        log::info!("gateway listening on {addr}");
        Ok(GatewayHandle { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Block until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
