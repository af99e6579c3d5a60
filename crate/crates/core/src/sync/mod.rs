//! Upload of local records to a central server, and the server itself.
//!
//! The protocol is line based over any reliable ordered byte stream:
//!
//! ```text
//! HELLO v1            -> OK v1
//! PUT <canonical>     -> OK <id>
//! LIST <patient_id>   -> BEGIN, canonical record lines, END
//! FLAGS <region>      -> ALERT <json> | NONE
//! QUIT                -> BYE
//! ```
//!
//! Any request can instead be answered with `ERR <reason>`.

mod client;
mod server;

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::records::RecordsError;

pub use client::{client_sync, client_sync_over, SyncSummary};
pub use server::{server_handle, serve_session, ServerStore, SessionState, SyncServer};

pub const PROTOCOL_VERSION: &str = "v1";
/// Environment variable naming the server's `host:port`.
pub const ENDPOINT_ENV: &str = "UMPHCS_SYNC_ENDPOINT";
/// Longest accepted request or reply line, excluding the LF.
pub const MAX_LINE: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrReason {
    MalformedLine,
    UnknownVerb,
    BeforeHello,
    UnknownPatient,
    VersionMismatch,
}

impl ErrReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrReason::MalformedLine => "malformed-line",
            ErrReason::UnknownVerb => "unknown-verb",
            ErrReason::BeforeHello => "before-hello",
            ErrReason::UnknownPatient => "unknown-patient",
            ErrReason::VersionMismatch => "version-mismatch",
        }
    }

    pub fn reply(&self) -> String {
        format!("ERR {}", self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("connection lost after {uploaded} uploads: {source}")]
    ConnectionLost { uploaded: usize, source: io::Error },
    #[error("server speaks a different protocol version: {0}")]
    VersionMismatch(String),
    #[error("server rejected {id}: {reason}")]
    Rejected { id: String, reason: String },
    #[error("unexpected reply: {0}")]
    Protocol(String),
    #[error("no sync endpoint given (use --endpoint or {ENDPOINT_ENV})")]
    NoEndpoint,
    #[error(transparent)]
    Records(#[from] RecordsError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl SyncError {
    pub fn code(&self) -> &'static str {
        match self {
            SyncError::ConnectionLost { .. } => "ConnectionLost",
            SyncError::VersionMismatch(_) => "VersionMismatch",
            SyncError::Rejected { .. } => "Rejected",
            SyncError::Protocol(_) => "ProtocolError",
            SyncError::NoEndpoint => "NoEndpoint",
            SyncError::Records(e) => e.code(),
            SyncError::Io(_) => "Io",
        }
    }
}

/// Pick the endpoint from an explicit flag, then the environment.
pub fn resolve_endpoint(flag: Option<&str>) -> Result<String, SyncError> {
    flag.map(str::to_owned)
        .or_else(|| std::env::var(ENDPOINT_ENV).ok())
        .filter(|s| !s.trim().is_empty())
        .ok_or(SyncError::NoEndpoint)
}

/// Buffered LF-delimited line I/O over a single duplex stream.
pub(crate) struct LineConn<S> {
    stream: S,
    buf: Vec<u8>,
}

pub(crate) enum LineRead {
    Line(String),
    Eof,
    TooLong,
    NotUtf8,
}

impl<S: Read + Write> LineConn<S> {
    pub(crate) fn new(stream: S) -> Self {
        LineConn { stream, buf: Vec::new() }
    }

    pub(crate) fn send(&mut self, line: &str) -> io::Result<()> {
        let mut out = Vec::with_capacity(line.len() + 1);
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
        self.stream.write_all(&out)?;
        self.stream.flush()
    }

    pub(crate) fn send_all(&mut self, lines: &[String]) -> io::Result<()> {
        let mut out = Vec::new();
        for l in lines {
            out.extend_from_slice(l.as_bytes());
            out.push(b'\n');
        }
        self.stream.write_all(&out)?;
        self.stream.flush()
    }

    pub(crate) fn recv(&mut self) -> io::Result<LineRead> {
        loop {
            if let Some(i) = self.buf.iter().position(|b| *b == b'\n') {
                let mut line: Vec<u8> = self.buf.drain(..=i).collect();
                line.pop();
                if line.last() == Some(&b'\r') {
                    line.pop();
                }
                return Ok(match String::from_utf8(line) {
                    Ok(s) => LineRead::Line(s),
                    Err(_) => LineRead::NotUtf8,
                });
            }
            if self.buf.len() > MAX_LINE {
                return Ok(LineRead::TooLong);
            }
            let mut chunk = [0u8; 8192];
            let n = self.stream.read(&mut chunk)?;
            if n == 0 {
                return Ok(LineRead::Eof);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }
}
