//! Emulated sensor hub, diagnostics pipelines, patient record store and
//! sync service for a smartphone-centred public health toolkit.
//!
//! The pieces, bottom-up:
//!
//! - [`wireproto`]: one-byte commands, ASCII-decimal replies, fault injection.
//! - [`hubsim`]: the hub firmware loop with its 10-bit ADC and safety cutoff.
//! - [`biosim`]: sensor transfer functions and synthetic patients.
//! - [`diagnostics`]: codes and streams to temperature, blood pressure,
//!   weight, eye power, hearing thresholds and height.
//! - [`records`]: patients, test records, the append-only store and
//!   weight-trend screening.
//! - [`session`]: measurement runs over an emulated link, with retries.
//! - [`sync`]: line protocol, upload client and the central server.
//! - [`advice`]: follow-up suggestions for abnormal results, as data.
//! - [`scenario`]: scripted, deterministic replays of whole sessions.
//! - [`gateway`]: HTTP endpoints and a live event stream for a browser console.
//! - [`cli`]: the `umphcs` command line.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` lists them.

pub mod advice;
pub mod biosim;
pub mod cli;
pub mod diagnostics;
pub mod gateway;
pub mod hubsim;
pub mod records;
pub mod scenario;
pub mod session;
pub mod sync;
pub mod wireproto;
