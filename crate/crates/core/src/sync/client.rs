use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::Serialize;

use super::{LineConn, LineRead, SyncError, PROTOCOL_VERSION};
use crate::records::{RecordStore, SyncTarget};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SyncSummary {
    /// Records uploaded in this run.
    pub uploaded: usize,
    /// Records already synced before this run.
    pub skipped: usize,
    /// Patients uploaded in this run.
    pub patients: usize,
}

const IO_TIMEOUT: Duration = Duration::from_secs(30);

pub fn client_sync(store: &mut RecordStore, endpoint: &str) -> Result<SyncSummary, SyncError> {
    let stream = TcpStream::connect(endpoint)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;
    client_sync_over(store, stream)
}

fn lost(uploaded: usize) -> impl Fn(io::Error) -> SyncError {
    move |source| SyncError::ConnectionLost { uploaded, source }
}

fn expect_line<S: Read + Write>(conn: &mut LineConn<S>, uploaded: usize) -> Result<String, SyncError> {
    match conn.recv().map_err(lost(uploaded))? {
        LineRead::Line(l) => Ok(l),
        LineRead::Eof => Err(lost(uploaded)(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the connection"))),
        LineRead::TooLong | LineRead::NotUtf8 => Err(SyncError::Protocol("unreadable reply".into())),
    }
}

fn put<S: Read + Write>(conn: &mut LineConn<S>, id: &str, line: &str, uploaded: usize) -> Result<(), SyncError> {
    conn.send(&format!("PUT {line}")).map_err(lost(uploaded))?;
    let reply = expect_line(conn, uploaded)?;
    match reply.strip_prefix("OK ") {
        Some(got) if got == id => Ok(()),
        _ => match reply.strip_prefix("ERR ") {
            Some(reason) => Err(SyncError::Rejected { id: id.to_owned(), reason: reason.to_owned() }),
            None => Err(SyncError::Protocol(reply)),
        },
    }
}

/// Upload every unsynced patient, then every unsynced record in `taken_at`
/// order, marking each synced as soon as the server acknowledges it.
///
/// A failure part way leaves the remaining items unsynced, so running
/// again resumes where this run stopped.
pub fn client_sync_over<S: Read + Write>(store: &mut RecordStore, stream: S) -> Result<SyncSummary, SyncError> {
    let mut conn = LineConn::new(stream);
    conn.send(&format!("HELLO {PROTOCOL_VERSION}")).map_err(lost(0))?;
    let hello = expect_line(&mut conn, 0)?;
    if hello != format!("OK {PROTOCOL_VERSION}") {
        return Err(if hello == "ERR version-mismatch" { SyncError::VersionMismatch(hello) } else { SyncError::Protocol(hello) });
    }

    let mut summary = SyncSummary::default();
    let patients: Vec<(String, String)> = store
        .unsynced_patients()
        .into_iter()
        .map(|p| (p.patient_id.clone(), store.index().patient_line(&p.patient_id).unwrap_or_default().to_owned()))
        .collect();
    for (id, line) in patients {
        put(&mut conn, &id, &line, summary.uploaded)?;
        store.mark_synced(SyncTarget::Patient(id))?;
        summary.patients += 1;
    }

    let pending: Vec<(String, String)> = store
        .unsynced_records()
        .into_iter()
        .map(|r| (r.record_id.clone(), store.index().record_line(&r.record_id).unwrap_or_default().to_owned()))
        .collect();
    summary.skipped = store.index().record_count() - pending.len();
    for (id, line) in pending {
        put(&mut conn, &id, &line, summary.uploaded)?;
        store.mark_synced(SyncTarget::Record(id))?;
        summary.uploaded += 1;
    }

    conn.send("QUIT").map_err(lost(summary.uploaded))?;
    let bye = expect_line(&mut conn, summary.uploaded)?;
    if bye != "BYE" {
        return Err(SyncError::Protocol(bye));
    }
    Ok(summary)
}
