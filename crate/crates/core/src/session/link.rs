use serde::Serialize;

use super::SessionError;
use crate::wireproto::{encode_command, FrameDecoder, HubCommand, HubResponse, MalformedReason, Transport};

/// What happened to a single request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attempt {
    Value(u16),
    Refused,
    Missing,
    Malformed(MalformedReason),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub requests: u64,
    pub missing: u64,
    pub malformed: u64,
    /// Well-formed replies set aside as inconsistent with the stream.
    pub implausible: u64,
}

/// Host side of the hub link: one outstanding command at a time.
pub struct HubLink<T> {
    transport: T,
    decoder: FrameDecoder,
    scratch: Vec<u8>,
    pub stats: LinkStats,
}

impl<T: Transport> HubLink<T> {
    pub fn new(transport: T) -> Self {
        HubLink { transport, decoder: FrameDecoder::new(), scratch: Vec::new(), stats: LinkStats::default() }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    pub fn now_ms(&self) -> f64 {
        self.transport.now_ms()
    }

    pub fn wait_until(&mut self, clock_ms: f64) {
        if clock_ms > self.transport.now_ms() {
            self.transport.advance_to(clock_ms);
        }
    }

    /// Send one command and wait one round trip for its reply.
    ///
    /// The decoder starts clean on every attempt so a damaged frame cannot
    /// bleed into the next one.
    pub fn request(&mut self, cmd: HubCommand) -> Attempt {
        self.scratch.clear();
        self.transport.read_available(&mut self.scratch);
        self.decoder.reset();
        self.stats.requests += 1;
        self.transport.write(&encode_command(cmd));
        let due = self.transport.now_ms() + self.transport.round_trip_ms();
        self.transport.advance_to(due);
        self.scratch.clear();
        self.transport.read_available(&mut self.scratch);
        let outcome = match self.decoder.push(&self.scratch).into_iter().next() {
            Some(Ok(HubResponse::AdcValue(v))) => Attempt::Value(v),
            Some(Ok(HubResponse::HubError)) => Attempt::Refused,
            Some(Err(reason)) => Attempt::Malformed(reason),
            None => Attempt::Missing,
        };
        match outcome {
            Attempt::Missing => self.stats.missing += 1,
            Attempt::Malformed(_) => self.stats.malformed += 1,
            _ => {}
        }
        outcome
    }

    /// Up to `attempts` tries for a value, returned with the clock time at
    /// which the hub took the sample. `Ok(None)` means every try was lost
    /// or garbled.
    ///
    /// A refusal is final only if no try got through: a command byte
    /// damaged in transit can turn into a different, refused command.
    pub fn sample(&mut self, cmd: HubCommand, attempts: u32) -> Result<Option<(u16, f64)>, SessionError> {
        let mut refused = false;
        for _ in 0..attempts {
            let sampled_at = self.transport.now_ms() + self.transport.round_trip_ms() / 2.0;
            match self.request(cmd) {
                Attempt::Value(v) => return Ok(Some((v, sampled_at))),
                Attempt::Refused => refused = true,
                Attempt::Missing | Attempt::Malformed(_) => {}
            }
        }
        if refused {
            return Err(SessionError::HubRefused);
        }
        Ok(None)
    }
}

impl<T: Transport> HubLink<T> {
    /// Like [`HubLink::sample`], but a value more than `gate.jump` codes
    /// from `last` is only believed once a second reply within the same
    /// call agrees with it (to within `gate.agree`).
    ///
    /// A dropped digit still parses as a number ("363" becomes "63"), so
    /// a streamed reading is checked against its predecessor before it is
    /// used. Real jumps, such as the valve dump, are confirmed by the
    /// retry. The very first reading needs two agreeing replies besides
    /// itself, since every later check leans on it. A jump to a shorter
    /// reply than `last` looks exactly like a dropped digit and needs
    /// three.
    pub fn sample_consistent(
        &mut self,
        cmd: HubCommand,
        attempts: u32,
        last: Option<u16>,
        gate: Gate,
    ) -> Result<Option<(u16, f64)>, SessionError> {
        let mut refused = false;
        let mut suspects: Vec<u16> = Vec::new();
        for _ in 0..attempts {
            let sampled_at = self.transport.now_ms() + self.transport.round_trip_ms() / 2.0;
            match self.request(cmd) {
                Attempt::Value(v) => {
                    let agrees = |s: &&u16| s.abs_diff(v) <= gate.agree && digits(**s) == digits(v);
                    let needed = match last {
                        None => 2,
                        Some(l) if digits(v) < digits(l) => 3,
                        Some(_) => 1,
                    };
                    if last.is_some_and(|l| v.abs_diff(l) <= gate.jump)
                        || suspects.iter().filter(agrees).count() >= needed
                    {
                        return Ok(Some((v, sampled_at)));
                    }
                    self.stats.implausible += 1;
                    suspects.push(v);
                }
                Attempt::Refused => refused = true,
                Attempt::Missing | Attempt::Malformed(_) => {}
            }
        }
        if refused && suspects.is_empty() {
            return Err(SessionError::HubRefused);
        }
        Ok(None)
    }
}

fn digits(v: u16) -> u32 {
    v.checked_ilog10().unwrap_or(0) + 1
}

/// Plausibility limits for [`HubLink::sample_consistent`], in ADC codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gate {
    /// Largest believable change from the previous reading.
    pub jump: u16,
    /// Two replies in the same poll this close are the same reading. The
    /// signal keeps moving between retries, so fast channels need more.
    pub agree: u16,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hubsim::{Channel, ChannelUnavailable, Hub, VirtualModule};
    use crate::wireproto::{EmulatedLink, FaultProfile, LinkConfig};

    struct Fixed(f64);

    impl VirtualModule for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn voltage(&self, _: Channel, _: f64) -> Result<f64, ChannelUnavailable> {
            Ok(self.0)
        }
    }

    #[test]
    fn wired_and_bluetooth_requests() {
        let mut link = HubLink::new(EmulatedLink::new(Hub::with_module(Box::new(Fixed(0.366))), LinkConfig::wired()));
        assert_eq!(link.request(HubCommand::SampleRaw), Attempt::Value(74));
        assert_eq!(link.now_ms(), 0.0);
        let mut bt = HubLink::new(EmulatedLink::new(Hub::with_module(Box::new(Fixed(0.366))), LinkConfig::bluetooth(2.0)));
        assert_eq!(bt.request(HubCommand::SampleRaw), Attempt::Value(74));
        assert_eq!(bt.now_ms(), 4.0);
        assert_eq!(bt.request(HubCommand::SampleFiltered), Attempt::Refused);
    }

    #[test]
    fn retries_recover_from_faults() {
        let faults = FaultProfile { drop_prob: 0.05, corrupt_prob: 0.05, seed: 3, latency_ms: 0.0 };
        let hub = Hub::with_module(Box::new(Fixed(0.366)));
        let mut link = HubLink::new(EmulatedLink::new(hub, LinkConfig::wired().with_faults(faults)));
        let mut got = 0;
        for _ in 0..200 {
            if let Ok(Some(_)) = link.sample(HubCommand::SampleRaw, 4) {
                got += 1;
            }
        }
        assert!(got > 180, "{got}");
        assert!(link.stats.missing + link.stats.malformed > 0);
    }

    #[test]
    fn gate_needs_confirmation_for_jumps() {
        const G: Gate = Gate { jump: 5, agree: 2 };
        let mut link = HubLink::new(EmulatedLink::new(Hub::with_module(Box::new(Fixed(0.366))), LinkConfig::wired()));
        assert_eq!(link.sample_consistent(HubCommand::SampleRaw, 4, Some(75), G).unwrap().unwrap().0, 74);
        // 74 is far from 30, so a second agreeing reply is needed.
        assert_eq!(link.sample_consistent(HubCommand::SampleRaw, 4, Some(30), G).unwrap().unwrap().0, 74);
        assert_eq!(link.stats.requests, 3);
        assert_eq!(link.stats.implausible, 1);
        assert_eq!(link.sample_consistent(HubCommand::SampleRaw, 1, Some(30), G).unwrap(), None);
        // Losing a digit against 300 needs three more; so does starting cold, less one.
        link.stats = LinkStats::default();
        assert_eq!(link.sample_consistent(HubCommand::SampleRaw, 4, Some(300), G).unwrap().unwrap().0, 74);
        assert_eq!(link.stats.requests, 4);
        assert_eq!(link.sample_consistent(HubCommand::SampleRaw, 3, Some(300), G).unwrap(), None);
        assert_eq!(link.sample_consistent(HubCommand::SampleRaw, 3, None, G).unwrap().unwrap().0, 74);
    }
}
