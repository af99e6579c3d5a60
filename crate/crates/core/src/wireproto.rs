//! Hub command/response wire protocol.
//!
//! Requests are a single byte: `S` asks for a sample of the raw ADC channel,
//! `F` for the band-pass filtered channel. Replies are ASCII decimal digits
//! terminated by LF (`512\n`), or the literal `ERR\n` when the hub refuses.
//!
//! The decoder is incremental and holds at most [`MAX_FRAME`] bytes of
//! partial frame, so a corrupted stream can never grow its state.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Largest value a 10-bit ADC can report.
pub const ADC_MAX: u16 = 1023;

/// Longest run of bytes (terminator excluded) the decoder buffers.
pub const MAX_FRAME: usize = 8;

const LF: u8 = b'\n';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HubCommand {
    SampleRaw,
    SampleFiltered,
}

impl HubCommand {
    pub const fn byte(self) -> u8 {
        match self {
            HubCommand::SampleRaw => b'S',
            HubCommand::SampleFiltered => b'F',
        }
    }

    /// Unknown bytes map to `None`; the hub ignores them.
    pub const fn from_byte(b: u8) -> Option<Self> {
        match b {
            b'S' => Some(HubCommand::SampleRaw),
            b'F' => Some(HubCommand::SampleFiltered),
            _ => None,
        }
    }
}

pub fn encode_command(cmd: HubCommand) -> [u8; 1] {
    [cmd.byte()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HubResponse {
    AdcValue(u16),
    HubError,
}

/// Render a response frame. Codes above [`ADC_MAX`] are a caller bug.
pub fn encode_response(resp: HubResponse) -> Vec<u8> {
    match resp {
        HubResponse::AdcValue(code) => {
            debug_assert!(code <= ADC_MAX);
            let mut out = code.to_string().into_bytes();
            out.push(LF);
            out
        }
        HubResponse::HubError => b"ERR\n".to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalformedReason {
    /// A byte that is neither a digit nor the terminator inside a numeric frame.
    NonDigit(u8),
    /// Digits parsed to a value above the ADC range.
    OutOfRange(u32),
    /// More than [`MAX_FRAME`] bytes without a terminator.
    Overlong,
    /// A bare terminator.
    EmptyFrame,
    /// Frame started with `E` but did not spell `ERR\n`.
    BadErrorFrame(u8),
}

impl fmt::Display for MalformedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MalformedReason::NonDigit(b) => write!(f, "non-digit byte 0x{b:02x} in numeric frame"),
            MalformedReason::OutOfRange(v) => write!(f, "value {v} outside ADC range"),
            MalformedReason::Overlong => write!(f, "frame longer than {MAX_FRAME} bytes"),
            MalformedReason::EmptyFrame => write!(f, "empty frame"),
            MalformedReason::BadErrorFrame(b) => write!(f, "unexpected byte 0x{b:02x} in ERR frame"),
        }
    }
}

/// Outcome of one [`decode_response`] call.
///
/// The `usize` on `Complete` and `Malformed` is the number of bytes taken
/// from the buffer passed to *this* call. `NeedMore` always takes the whole
/// buffer into the decoder state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoded {
    Complete(HubResponse, usize),
    NeedMore,
    Malformed(MalformedReason, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum Mode {
    #[default]
    Start,
    Digits,
    /// Matched this many bytes of "ERR".
    Err(u8),
    /// Skipping the rest of a bad frame up to and including LF.
    Discard,
}

/// Partial-frame state carried between [`decode_response`] calls.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecoderState {
    mode: Mode,
    value: u32,
    len: usize,
}

impl DecoderState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes of the current frame held so far. Never exceeds [`MAX_FRAME`].
    pub fn pending(&self) -> usize {
        self.len
    }

    pub fn is_discarding(&self) -> bool {
        self.mode == Mode::Discard
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    fn fail(&mut self, reason: MalformedReason, consumed: usize, resync: bool) -> Decoded {
        *self = Self::default();
        if resync {
            self.mode = Mode::Discard;
        }
        Decoded::Malformed(reason, consumed)
    }
}

/// Decode at most one frame from `buf`, continuing from `state`.
pub fn decode_response(buf: &[u8], state: &mut DecoderState) -> Decoded {
    for (i, &b) in buf.iter().enumerate() {
        let consumed = i + 1;
        match state.mode {
            Mode::Discard => {
                if b == LF {
                    state.reset();
                }
            }
            Mode::Start | Mode::Digits if b == LF => {
                if state.mode == Mode::Start {
                    return state.fail(MalformedReason::EmptyFrame, consumed, false);
                }
                let value = state.value;
                state.reset();
                return if value > u32::from(ADC_MAX) {
                    Decoded::Malformed(MalformedReason::OutOfRange(value), consumed)
                } else {
                    Decoded::Complete(HubResponse::AdcValue(value as u16), consumed)
                };
            }
            Mode::Start | Mode::Digits => {
                if b.is_ascii_digit() {
                    if state.len == MAX_FRAME {
                        return state.fail(MalformedReason::Overlong, consumed, true);
                    }
                    state.mode = Mode::Digits;
                    state.value = state.value * 10 + u32::from(b - b'0');
                    state.len += 1;
                } else if b == b'E' && state.mode == Mode::Start {
                    state.mode = Mode::Err(1);
                    state.len = 1;
                } else {
                    return state.fail(MalformedReason::NonDigit(b), consumed, true);
                }
            }
            Mode::Err(matched) => {
                if matched == 3 {
                    if b == LF {
                        state.reset();
                        return Decoded::Complete(HubResponse::HubError, consumed);
                    }
                    return state.fail(MalformedReason::BadErrorFrame(b), consumed, true);
                }
                if b == b'R' {
                    state.mode = Mode::Err(matched + 1);
                    state.len += 1;
                } else if b == LF {
                    return state.fail(MalformedReason::BadErrorFrame(b), consumed, false);
                } else {
                    return state.fail(MalformedReason::BadErrorFrame(b), consumed, true);
                }
            }
        }
    }
    Decoded::NeedMore
}

/// Convenience wrapper that owns a [`DecoderState`] and splits a byte
/// stream into frames.
#[derive(Debug, Default, Clone)]
pub struct FrameDecoder {
    state: DecoderState,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> &DecoderState {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }

    /// Feed bytes and collect every frame they finish.
    pub fn push(&mut self, mut bytes: &[u8]) -> Vec<Result<HubResponse, MalformedReason>> {
        let mut frames = Vec::new();
        while !bytes.is_empty() {
            match decode_response(bytes, &mut self.state) {
                Decoded::Complete(resp, n) => {
                    frames.push(Ok(resp));
                    bytes = &bytes[n..];
                }
                Decoded::Malformed(reason, n) => {
                    frames.push(Err(reason));
                    bytes = &bytes[n..];
                }
                Decoded::NeedMore => break,
            }
        }
        frames
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultProfile {
    pub drop_prob: f64,
    pub corrupt_prob: f64,
    pub seed: u64,
    #[serde(default)]
    pub latency_ms: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FaultProfileError {
    #[error("{name} must be a probability in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("latency must be finite and nonnegative, got {0}")]
    Latency(f64),
}

impl FaultProfile {
    pub fn lossless(seed: u64) -> Self {
        FaultProfile { drop_prob: 0.0, corrupt_prob: 0.0, seed, latency_ms: 0.0 }
    }

    pub fn validate(&self) -> Result<(), FaultProfileError> {
        for (name, value) in [("drop_prob", self.drop_prob), ("corrupt_prob", self.corrupt_prob)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(FaultProfileError::Probability { name, value });
            }
        }
        if !(self.latency_ms.is_finite() && self.latency_ms >= 0.0) {
            return Err(FaultProfileError::Latency(self.latency_ms));
        }
        Ok(())
    }
}

/// Stateful fault source: successive calls continue one seeded sequence.
#[derive(Debug, Clone)]
pub struct FaultInjector {
    drop_prob: f64,
    corrupt_prob: f64,
    rng: ChaCha8Rng,
}

impl FaultInjector {
    pub fn new(profile: &FaultProfile) -> Self {
        Self::with_seed(profile, profile.seed)
    }

    pub fn with_seed(profile: &FaultProfile, seed: u64) -> Self {
        FaultInjector {
            drop_prob: profile.drop_prob,
            corrupt_prob: profile.corrupt_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(data.len());
        for &b in data {
            // Both draws happen for every byte so the sequence depends only on
            // the byte count, not on earlier outcomes.
            let drop_roll: f64 = self.rng.random();
            let corrupt_roll: f64 = self.rng.random();
            let mask: u8 = self.rng.random_range(1..=255);
            if drop_roll < self.drop_prob {
                continue;
            }
            if corrupt_roll < self.corrupt_prob {
                out.push(b ^ mask);
            } else {
                out.push(b);
            }
        }
        out
    }
}

/// One-shot fault application. Deterministic for a fixed profile.
pub fn apply_faults(profile: &FaultProfile, data: &[u8]) -> Vec<u8> {
    FaultInjector::new(profile).apply(data)
}

/// Ordered duplex byte stream as seen from the host side.
pub trait Transport {
    fn write(&mut self, bytes: &[u8]);
    /// Append every byte delivered so far to `out`; returns how many.
    fn read_available(&mut self, out: &mut Vec<u8>) -> usize;
    /// Advance the simulated clock. Time never moves backwards.
    fn advance_to(&mut self, clock_ms: f64);
    fn now_ms(&self) -> f64;
    /// Round-trip delay a reply needs before it becomes readable.
    fn round_trip_ms(&self) -> f64;
}

/// The far end of a link: consumes request bytes, produces reply bytes.
pub trait ByteEndpoint {
    fn on_bytes(&mut self, data: &[u8], clock_ms: f64) -> Vec<u8>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Wired,
    Bluetooth,
}

impl std::str::FromStr for LinkKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wired" => Ok(LinkKind::Wired),
            "bluetooth" => Ok(LinkKind::Bluetooth),
            other => Err(format!("unknown transport {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    pub kind: LinkKind,
    pub latency_ms: f64,
    pub faults: Option<FaultProfile>,
}

impl LinkConfig {
    pub fn wired() -> Self {
        LinkConfig { kind: LinkKind::Wired, latency_ms: 0.0, faults: None }
    }

    pub fn bluetooth(latency_ms: f64) -> Self {
        LinkConfig { kind: LinkKind::Bluetooth, latency_ms, faults: None }
    }

    pub fn for_kind(kind: LinkKind) -> Self {
        match kind {
            LinkKind::Wired => Self::wired(),
            LinkKind::Bluetooth => Self::bluetooth(DEFAULT_BLUETOOTH_LATENCY_MS),
        }
    }

    /// Attach a fault profile; its `latency_ms`, when set, overrides the link's.
    pub fn with_faults(mut self, faults: FaultProfile) -> Self {
        if faults.latency_ms > 0.0 {
            self.latency_ms = faults.latency_ms;
        }
        self.faults = Some(faults);
        self
    }
}

pub const DEFAULT_BLUETOOTH_LATENCY_MS: f64 = 2.0;

// Keeps the reply stream's fault sequence independent of the request stream's.
const DOWNLINK_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// In-process link to a [`ByteEndpoint`] with optional latency and faults.
pub struct EmulatedLink<E> {
    endpoint: E,
    config: LinkConfig,
    clock_ms: f64,
    uplink: Option<FaultInjector>,
    downlink: Option<FaultInjector>,
    in_flight: VecDeque<(f64, Vec<u8>)>,
}

impl<E: ByteEndpoint> EmulatedLink<E> {
    pub fn new(endpoint: E, config: LinkConfig) -> Self {
        let (uplink, downlink) = match &config.faults {
            Some(p) => (
                Some(FaultInjector::new(p)),
                Some(FaultInjector::with_seed(p, p.seed ^ DOWNLINK_SEED_SALT)),
            ),
            None => (None, None),
        };
        EmulatedLink { endpoint, config, clock_ms: 0.0, uplink, downlink, in_flight: VecDeque::new() }
    }

    pub fn config(&self) -> &LinkConfig {
        &self.config
    }

    pub fn endpoint(&self) -> &E {
        &self.endpoint
    }

    pub fn endpoint_mut(&mut self) -> &mut E {
        &mut self.endpoint
    }

    pub fn into_endpoint(self) -> E {
        self.endpoint
    }
}

impl<E: ByteEndpoint> Transport for EmulatedLink<E> {
    fn write(&mut self, bytes: &[u8]) {
        let sent = match &mut self.uplink {
            Some(f) => f.apply(bytes),
            None => bytes.to_vec(),
        };
        let arrive = self.clock_ms + self.config.latency_ms;
        let reply = self.endpoint.on_bytes(&sent, arrive);
        if reply.is_empty() {
            return;
        }
        let reply = match &mut self.downlink {
            Some(f) => f.apply(&reply),
            None => reply,
        };
        if !reply.is_empty() {
            self.in_flight.push_back((arrive + self.config.latency_ms, reply));
        }
    }

    fn read_available(&mut self, out: &mut Vec<u8>) -> usize {
        let mut n = 0;
        while let Some((at, _)) = self.in_flight.front() {
            if *at > self.clock_ms {
                break;
            }
            let (_, bytes) = self.in_flight.pop_front().expect("front checked");
            n += bytes.len();
            out.extend_from_slice(&bytes);
        }
        n
    }

    fn advance_to(&mut self, clock_ms: f64) {
        if clock_ms > self.clock_ms {
            self.clock_ms = clock_ms;
        }
    }

    fn now_ms(&self) -> f64 {
        self.clock_ms
    }

    fn round_trip_ms(&self) -> f64 {
        2.0 * self.config.latency_ms
    }
}
