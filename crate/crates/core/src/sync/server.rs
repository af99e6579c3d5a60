use std::fs::File;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, RwLock, RwLockReadGuard};
use std::thread::JoinHandle;

use super::{ErrReason, LineConn, LineRead, PROTOCOL_VERSION};
use crate::records::store::{append_line, load_log};
use crate::records::{to_canonical, LogIndex, LogLine, RecordsError, ScreeningConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PutOutcome {
    Stored(String),
    Unchanged(String),
    Superseded(String),
}

enum WriteOp {
    Put(LogLine, String, mpsc::Sender<Result<PutOutcome, ErrReason>>),
}

/// The server's copy of all uploaded patients and records.
///
/// Reads go through a shared lock; every mutation is performed by one
/// writer thread in arrival order.
#[derive(Clone)]
pub struct ServerStore {
    index: Arc<RwLock<LogIndex>>,
    log: Arc<RwLock<Vec<String>>>,
    writer: mpsc::Sender<WriteOp>,
    pub screening: ScreeningConfig,
}

impl ServerStore {
    pub fn in_memory() -> Self {
        Self::start(LogIndex::new(), Vec::new(), None)
    }

    /// Open a persistent server log, replaying it into the index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RecordsError> {
        let (file, lines) = load_log(path.as_ref())?;
        let mut index = LogIndex::new();
        let mut log = Vec::with_capacity(lines.len());
        for (line, raw) in lines {
            match line {
                LogLine::Patient(p) => index.insert_patient(p, raw.clone()),
                LogLine::Record(r) => {
                    index.insert_record(r, raw.clone());
                }
                LogLine::Synced { .. } | LogLine::Supersede { .. } => {}
            }
            log.push(raw);
        }
        Ok(Self::start(index, log, Some(file)))
    }

    fn start(index: LogIndex, log: Vec<String>, mut file: Option<File>) -> Self {
        let index = Arc::new(RwLock::new(index));
        let log = Arc::new(RwLock::new(log));
        let (tx, rx) = mpsc::channel::<WriteOp>();
        let (w_index, w_log) = (index.clone(), log.clone());
        std::thread::spawn(move || {
            for op in rx {
                match op {
                    WriteOp::Put(parsed, raw, reply) => {
                        let res = apply_put(&w_index, &w_log, file.as_mut(), parsed, raw);
                        let _ = reply.send(res);
                    }
                }
            }
        });
        ServerStore { index, log, writer: tx, screening: ScreeningConfig::default() }
    }

    pub fn put(&self, parsed: LogLine, raw: String) -> Result<PutOutcome, ErrReason> {
        let (tx, rx) = mpsc::channel();
        self.writer.send(WriteOp::Put(parsed, raw, tx)).expect("writer thread alive");
        rx.recv().expect("writer thread replies")
    }

    pub fn index(&self) -> RwLockReadGuard<'_, LogIndex> {
        self.index.read().unwrap_or_else(|e| e.into_inner())
    }

    /// Every line ever written, in order, including superseded ones.
    pub fn log_lines(&self) -> Vec<String> {
        self.log.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

fn apply_put(
    index: &RwLock<LogIndex>,
    log: &RwLock<Vec<String>>,
    mut file: Option<&mut File>,
    parsed: LogLine,
    raw: String,
) -> Result<PutOutcome, ErrReason> {
    let mut idx = index.write().unwrap_or_else(|e| e.into_inner());
    let mut write = |line: &str| {
        if let Some(f) = file.as_deref_mut() {
            if let Err(e) = append_line(f, line) {
                log::error!("server log write failed: {e}");
            }
        }
        log.write().unwrap_or_else(|e| e.into_inner()).push(line.to_owned());
    };
    match parsed {
        LogLine::Patient(p) => {
            let id = p.patient_id.clone();
            match idx.patient_line(&id) {
                Some(existing) if existing == raw => return Ok(PutOutcome::Unchanged(id)),
                Some(_) => {
                    write(&raw);
                    idx.insert_patient(p, raw);
                    Ok(PutOutcome::Superseded(id))
                }
                None => {
                    write(&raw);
                    idx.insert_patient(p, raw);
                    Ok(PutOutcome::Stored(id))
                }
            }
        }
        LogLine::Record(r) => {
            if idx.patient(&r.patient_id).is_none() {
                return Err(ErrReason::UnknownPatient);
            }
            let id = r.record_id.clone();
            let outcome = match idx.record_line(&id) {
                Some(existing) if existing == raw => return Ok(PutOutcome::Unchanged(id)),
                Some(_) => {
                    write(&LogLine::Supersede { record_id: id.clone() }.to_line());
                    PutOutcome::Superseded(id)
                }
                None => PutOutcome::Stored(id),
            };
            write(&raw);
            idx.insert_record(r, raw);
            Ok(outcome)
        }
        LogLine::Synced { .. } | LogLine::Supersede { .. } => Err(ErrReason::MalformedLine),
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct SessionState {
    pub hello: bool,
    pub closed: bool,
}

/// Answer one request line with its reply unit.
pub fn server_handle(store: &ServerStore, session: &mut SessionState, line: &str) -> Vec<String> {
    let err = |r: ErrReason| vec![r.reply()];
    let (verb, arg) = match line.split_once(' ') {
        Some((v, a)) => (v, Some(a)),
        None => (line, None),
    };
    if !matches!(verb, "HELLO" | "PUT" | "LIST" | "FLAGS" | "QUIT") {
        return err(if line.trim().is_empty() { ErrReason::MalformedLine } else { ErrReason::UnknownVerb });
    }
    if verb == "QUIT" {
        if arg.is_some() {
            return err(ErrReason::MalformedLine);
        }
        session.closed = true;
        return vec!["BYE".into()];
    }
    if verb == "HELLO" {
        return match arg {
            Some(PROTOCOL_VERSION) => {
                session.hello = true;
                vec![format!("OK {PROTOCOL_VERSION}")]
            }
            Some(v) if !v.is_empty() && !v.contains(' ') => err(ErrReason::VersionMismatch),
            _ => err(ErrReason::MalformedLine),
        };
    }
    if !session.hello {
        return err(ErrReason::BeforeHello);
    }
    let Some(arg) = arg.filter(|a| !a.is_empty()) else {
        return err(ErrReason::MalformedLine);
    };
    match verb {
        "PUT" => {
            let Ok(parsed) = LogLine::parse(arg) else {
                return err(ErrReason::MalformedLine);
            };
            if parsed.to_line() != arg {
                return err(ErrReason::MalformedLine);
            }
            match store.put(parsed, arg.to_owned()) {
                Ok(PutOutcome::Stored(id) | PutOutcome::Unchanged(id) | PutOutcome::Superseded(id)) => vec![format!("OK {id}")],
                Err(r) => err(r),
            }
        }
        "LIST" => {
            let idx = store.index();
            if idx.patient(arg).is_none() {
                return err(ErrReason::UnknownPatient);
            }
            let mut out = vec!["BEGIN".to_owned()];
            out.extend(idx.history(arg, None).iter().filter_map(|r| idx.record_line(&r.record_id)).map(str::to_owned));
            out.push("END".into());
            out
        }
        "FLAGS" => match store.index().screen_region(arg, &store.screening) {
            Some(alert) => vec![format!("ALERT {}", to_canonical(&alert))],
            None => vec!["NONE".into()],
        },
        _ => unreachable!("verb checked above"),
    }
}

/// Run one client session to completion over a duplex stream.
pub fn serve_session<S: Read + Write>(store: &ServerStore, stream: S) -> std::io::Result<()> {
    let mut conn = LineConn::new(stream);
    let mut session = SessionState::default();
    while !session.closed {
        let reply = match conn.recv()? {
            LineRead::Eof => return Ok(()),
            LineRead::TooLong => {
                conn.send(&ErrReason::MalformedLine.reply())?;
                return Ok(());
            }
            LineRead::NotUtf8 => vec![ErrReason::MalformedLine.reply()],
            LineRead::Line(line) => server_handle(store, &mut session, &line),
        };
        conn.send_all(&reply)?;
    }
    Ok(())
}

/// A TCP listener handing each connection its own thread.
pub struct SyncServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl SyncServer {
    pub fn bind(addr: impl ToSocketAddrs, store: ServerStore) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let store = store.clone();
                        std::thread::spawn(move || {
                            let peer = stream.peer_addr().ok();
                            if let Err(e) = serve_session(&store, stream) {
                                log::debug!("sync session {peer:?} ended: {e}");
                            }
                        });
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        });
        log::info!("sync server listening on {addr}");
        Ok(SyncServer { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Block until the listener stops.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SyncServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{Patient, Payload, TestKind, TestRecord};
    use chrono::{TimeZone, Utc};

    fn patient(id: &str, region: &str) -> String {
        Patient::new(id, "N", region, Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()).to_line()
    }

    fn weight(id: &str, pid: &str, day: u32, kg: f64) -> String {
        TestRecord::new(
            id,
            pid,
            "d",
            Utc.with_ymd_and_hms(2024, 1, day, 0, 0, 0).unwrap(),
            TestKind::Weight,
            Payload::scalar(TestKind::Weight, kg).unwrap(),
        )
        .unwrap()
        .to_line()
    }

    fn talk(store: &ServerStore, s: &mut SessionState, line: &str) -> Vec<String> {
        server_handle(store, s, line)
    }

    #[test]
    fn grammar() {
        let store = ServerStore::in_memory();
        let mut s = SessionState::default();
        assert_eq!(talk(&store, &mut s, "LIST p"), ["ERR before-hello"]);
        assert_eq!(talk(&store, &mut s, "JUMP x"), ["ERR unknown-verb"]);
        assert_eq!(talk(&store, &mut s, ""), ["ERR malformed-line"]);
        assert_eq!(talk(&store, &mut s, "HELLO v2"), ["ERR version-mismatch"]);
        assert_eq!(talk(&store, &mut s, "HELLO"), ["ERR malformed-line"]);
        assert_eq!(talk(&store, &mut s, "HELLO v1"), ["OK v1"]);
        assert_eq!(talk(&store, &mut s, "PUT {nope"), ["ERR malformed-line"]);
        assert_eq!(talk(&store, &mut s, "PUT"), ["ERR malformed-line"]);
        assert_eq!(talk(&store, &mut s, "LIST ghost"), ["ERR unknown-patient"]);
        assert_eq!(talk(&store, &mut s, &format!("PUT {}", weight("r1", "ghost", 1, 70.0))), ["ERR unknown-patient"]);
        let spaced = patient("p", "r").replace(",", ", ");
        assert_eq!(talk(&store, &mut s, &format!("PUT {spaced}")), ["ERR malformed-line"]);
        assert_eq!(talk(&store, &mut s, r#"PUT {"type":"synced","record_id":"r"}"#), ["ERR malformed-line"]);
        assert_eq!(talk(&store, &mut s, "QUIT"), ["BYE"]);
        assert!(s.closed);
    }

    #[test]
    fn put_list_echo_and_idempotence() {
        let store = ServerStore::in_memory();
        let mut s = SessionState { hello: true, closed: false };
        assert_eq!(talk(&store, &mut s, &format!("PUT {}", patient("p", "r"))), ["OK p"]);
        let l2 = weight("r2", "p", 2, 69.0);
        let l1 = weight("r1", "p", 1, 70.0);
        assert_eq!(talk(&store, &mut s, &format!("PUT {l2}")), ["OK r2"]);
        assert_eq!(talk(&store, &mut s, &format!("PUT {l1}")), ["OK r1"]);
        assert_eq!(talk(&store, &mut s, &format!("PUT {l1}")), ["OK r1"]);
        assert_eq!(talk(&store, &mut s, "LIST p"), ["BEGIN", l1.as_str(), l2.as_str(), "END"]);
        assert_eq!(store.log_lines().len(), 3);
    }

    #[test]
    fn last_writer_wins_with_marker() {
        let store = ServerStore::in_memory();
        let mut s = SessionState { hello: true, closed: false };
        talk(&store, &mut s, &format!("PUT {}", patient("p", "r")));
        let old = weight("r1", "p", 1, 70.0);
        let new = weight("r1", "p", 1, 71.0);
        talk(&store, &mut s, &format!("PUT {old}"));
        assert_eq!(talk(&store, &mut s, &format!("PUT {new}")), ["OK r1"]);
        assert_eq!(talk(&store, &mut s, "LIST p"), ["BEGIN", new.as_str(), "END"]);
        let log = store.log_lines();
        assert_eq!(log[1..], [old, r#"{"type":"supersede","record_id":"r1"}"#.to_owned(), new]);
    }

    #[test]
    fn flags_match_local_screening() {
        let store = ServerStore::in_memory();
        let mut s = SessionState { hello: true, closed: false };
        assert_eq!(talk(&store, &mut s, "FLAGS nowhere"), ["NONE"]);
        for (pid, kgs) in [("a", [70.0, 68.0, 66.0]), ("b", [60.0, 60.0, 60.0])] {
            talk(&store, &mut s, &format!("PUT {}", patient(pid, "hill side")));
            for (i, kg) in kgs.iter().enumerate() {
                talk(&store, &mut s, &format!("PUT {}", weight(&format!("{pid}{i}"), pid, i as u32 + 1, *kg)));
            }
        }
        let reply = talk(&store, &mut s, "FLAGS hill side");
        let local = store.index().screen_region("hill side", &ScreeningConfig::default()).unwrap();
        assert_eq!(reply, [format!("ALERT {}", to_canonical(&local))]);
        assert!(reply[0].contains(r#""flagged":1,"eligible":2"#));
    }

    #[test]
    fn persistent_log_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.jsonl");
        let store = ServerStore::open(&path).unwrap();
        let mut s = SessionState { hello: true, closed: false };
        talk(&store, &mut s, &format!("PUT {}", patient("p", "r")));
        talk(&store, &mut s, &format!("PUT {}", weight("r1", "p", 1, 70.0)));
        let new = weight("r1", "p", 1, 72.0);
        talk(&store, &mut s, &format!("PUT {new}"));
        drop(store);
        let store = ServerStore::open(&path).unwrap();
        assert_eq!(store.index().record_line("r1"), Some(new.as_str()));
        assert_eq!(store.log_lines().len(), 4);
    }

    #[test]
    fn tcp_session() {
        use std::io::{BufRead, BufReader};
        let server = SyncServer::bind("127.0.0.1:0", ServerStore::in_memory()).unwrap();
        let stream = TcpStream::connect(server.local_addr()).unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut w = stream;
        w.write_all(b"HELLO v1\nJUMP\nQUIT\n").unwrap();
        let mut lines = Vec::new();
        for _ in 0..3 {
            let mut l = String::new();
            reader.read_line(&mut l).unwrap();
            lines.push(l);
        }
        assert_eq!(lines, ["OK v1\n", "ERR unknown-verb\n", "BYE\n"]);
        server.shutdown();
    }
}
