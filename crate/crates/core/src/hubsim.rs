//! Sensor hub emulator.
//!
//! The hub samples whatever module is plugged into its port and knows
//! nothing about what the module measures. Interpretation of codes lives in
//! [`crate::diagnostics`].

use std::fmt;

use crate::wireproto::{encode_response, ByteEndpoint, HubCommand, HubResponse};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcModel {
    pub resolution_bits: u8,
    pub vref: f64,
}

impl Default for AdcModel {
    fn default() -> Self {
        AdcModel { resolution_bits: 10, vref: 5.0 }
    }
}

impl AdcModel {
    pub fn new(resolution_bits: u8, vref: f64) -> Option<Self> {
        (resolution_bits >= 1 && resolution_bits <= 16 && vref > 0.0 && vref.is_finite())
            .then_some(AdcModel { resolution_bits, vref })
    }

    pub fn levels(&self) -> u32 {
        1u32 << self.resolution_bits
    }

    pub fn max_code(&self) -> u16 {
        (self.levels() - 1) as u16
    }

    /// Input span of one code.
    pub fn lsb_volts(&self) -> f64 {
        self.vref / f64::from(self.levels())
    }

    /// Truncating conversion, clamped to the code range.
    pub fn quantize(&self, v: f64) -> u16 {
        debug_assert!(v.is_finite());
        let raw = (v * f64::from(self.levels()) / self.vref).floor();
        raw.clamp(0.0, f64::from(self.max_code())) as u16
    }

    /// Lower edge of the input interval that maps to `code`.
    pub fn code_to_volts(&self, code: u16) -> f64 {
        f64::from(code) * self.lsb_volts()
    }
}

pub fn quantize(model: &AdcModel, v: f64) -> u16 {
    model.quantize(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Raw,
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("module has no filtered channel")]
pub struct ChannelUnavailable;

/// Something that can sit on the hub's sensor port.
pub trait VirtualModule: Send {
    fn name(&self) -> &str;

    fn has_filtered_channel(&self) -> bool {
        false
    }

    /// Voltage on `channel` at `clock_ms` since session start. Must be finite.
    fn voltage(&self, channel: Channel, clock_ms: f64) -> Result<f64, ChannelUnavailable>;
}

impl fmt::Debug for dyn VirtualModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtualModule({})", self.name())
    }
}

pub enum HubAction {
    Attach(Box<dyn VirtualModule>),
    Detach,
    /// Close the cutoff switch: the port is live and sampling is allowed.
    SafetyOn,
    /// Open the cutoff switch for module changes.
    SafetyOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum HubConfigError {
    #[error("modules may only be attached while the safety cutoff is open")]
    AttachWhileLive,
}

#[derive(Debug, Default)]
pub struct HubState {
    attached: Option<Box<dyn VirtualModule>>,
    /// True when the port is powered; false means the cutoff is engaged.
    pub safety_enabled: bool,
    pub clock_ms: f64,
}

impl HubState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attached(&self) -> Option<&dyn VirtualModule> {
        self.attached.as_deref()
    }

    pub fn has_filter_channel(&self) -> bool {
        self.attached.as_ref().is_some_and(|m| m.has_filtered_channel())
    }

    pub fn configure(&mut self, action: HubAction) -> Result<(), HubConfigError> {
        match action {
            HubAction::Attach(module) => {
                if self.safety_enabled {
                    return Err(HubConfigError::AttachWhileLive);
                }
                self.attached = Some(module);
            }
            HubAction::Detach => self.attached = None,
            HubAction::SafetyOn => self.safety_enabled = true,
            HubAction::SafetyOff => self.safety_enabled = false,
        }
        Ok(())
    }

    pub fn serve(&self, cmd: HubCommand, model: &AdcModel) -> HubResponse {
        if !self.safety_enabled {
            return HubResponse::HubError;
        }
        let Some(module) = &self.attached else {
            return HubResponse::HubError;
        };
        let channel = match cmd {
            HubCommand::SampleRaw => Channel::Raw,
            HubCommand::SampleFiltered if module.has_filtered_channel() => Channel::Filtered,
            HubCommand::SampleFiltered => return HubResponse::HubError,
        };
        match module.voltage(channel, self.clock_ms) {
            Ok(v) if v.is_finite() => HubResponse::AdcValue(model.quantize(v)),
            _ => HubResponse::HubError,
        }
    }
}

/// Value-style wrapper around [`HubState::configure`].
pub fn configure(mut state: HubState, action: HubAction) -> Result<HubState, HubConfigError> {
    state.configure(action)?;
    Ok(state)
}

pub fn serve(state: &HubState, cmd: HubCommand, model: &AdcModel) -> HubResponse {
    state.serve(cmd, model)
}

/// Hub firmware loop: one reply frame per recognised command byte.
#[derive(Debug, Default)]
pub struct Hub {
    pub state: HubState,
    pub adc: AdcModel,
    served: u64,
    ignored: u64,
}

impl Hub {
    pub fn new(adc: AdcModel) -> Self {
        Hub { state: HubState::new(), adc, served: 0, ignored: 0 }
    }

    /// Hub with `module` attached and the port live.
    pub fn with_module(module: Box<dyn VirtualModule>) -> Self {
        let mut hub = Hub::new(AdcModel::default());
        hub.state.configure(HubAction::Attach(module)).expect("cutoff open on a fresh hub");
        hub.state.configure(HubAction::SafetyOn).expect("safety on never fails");
        hub
    }

    pub fn served(&self) -> u64 {
        self.served
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }
}

impl ByteEndpoint for Hub {
    fn on_bytes(&mut self, data: &[u8], clock_ms: f64) -> Vec<u8> {
        if clock_ms > self.state.clock_ms {
            self.state.clock_ms = clock_ms;
        }
        let mut out = Vec::new();
        for &b in data {
            match HubCommand::from_byte(b) {
                Some(cmd) => {
                    self.served += 1;
                    out.extend(encode_response(self.state.serve(cmd, &self.adc)));
                }
                None => self.ignored += 1,
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wireproto::FrameDecoder;
    use proptest::prelude::*;

    struct Fixed(f64);

    impl VirtualModule for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }

        fn voltage(&self, channel: Channel, _clock_ms: f64) -> Result<f64, ChannelUnavailable> {
            match channel {
                Channel::Raw => Ok(self.0),
                Channel::Filtered => Err(ChannelUnavailable),
            }
        }
    }

    #[test]
    fn quantize_examples() {
        let adc = AdcModel::default();
        assert_eq!(adc.quantize(0.0), 0);
        assert_eq!(adc.quantize(5.0), 1023);
        assert_eq!(adc.quantize(2.5), 512);
        assert_eq!(adc.quantize(-1.0), 0);
        assert_eq!(adc.quantize(7.0), 1023);
        // 0.366 V is what an LM35 puts out at 36.6 °C.
        assert_eq!(adc.quantize(0.366), 74);
    }

    #[test]
    fn model_validation() {
        assert!(AdcModel::new(0, 5.0).is_none());
        assert!(AdcModel::new(10, 0.0).is_none());
        assert_eq!(AdcModel::new(12, 3.3).unwrap().max_code(), 4095);
    }

    #[test]
    fn serve_refusals() {
        let adc = AdcModel::default();
        let mut st = HubState::new();
        st.configure(HubAction::Attach(Box::new(Fixed(0.366)))).unwrap();
        assert_eq!(st.serve(HubCommand::SampleRaw, &adc), HubResponse::HubError);
        st.configure(HubAction::SafetyOn).unwrap();
        assert_eq!(st.serve(HubCommand::SampleRaw, &adc), HubResponse::AdcValue(74));
        assert!(!st.has_filter_channel());
        assert_eq!(st.serve(HubCommand::SampleFiltered, &adc), HubResponse::HubError);
        st.configure(HubAction::Detach).unwrap();
        assert_eq!(st.serve(HubCommand::SampleRaw, &adc), HubResponse::HubError);
    }

    #[test]
    fn attach_requires_cutoff() {
        let st = configure(HubState::new(), HubAction::SafetyOn).unwrap();
        let err = configure(st, HubAction::Attach(Box::new(Fixed(1.0)))).unwrap_err();
        assert_eq!(err, HubConfigError::AttachWhileLive);
    }

    #[test]
    fn hub_ignores_unknown_bytes() {
        let mut hub = Hub::with_module(Box::new(Fixed(2.5)));
        let out = hub.on_bytes(b"xSqS\n", 0.0);
        assert_eq!(out, b"512\n512\n");
        assert_eq!(hub.served(), 2);
        assert_eq!(hub.ignored(), 3);
    }

    proptest! {
        #[test]
        fn quantize_monotone_and_in_range(a in -1.0f64..6.0, b in -1.0f64..6.0) {
            let adc = AdcModel::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(adc.quantize(lo) <= adc.quantize(hi));
            prop_assert!(adc.quantize(hi) <= 1023);
        }

        #[test]
        fn code_steps_are_one_lsb(code in 0u16..1023) {
            let adc = AdcModel::default();
            let edge = adc.code_to_volts(code);
            prop_assert_eq!(adc.quantize(edge + adc.lsb_volts() * 0.5), code);
            prop_assert_eq!(adc.quantize(edge + adc.lsb_volts() * 1.5), code + 1);
        }

        #[test]
        fn lockstep_reply_count(cmds in proptest::collection::vec(any::<u8>(), 0..200), v in 0.0f64..5.0) {
            let mut hub = Hub::with_module(Box::new(Fixed(v)));
            let valid = cmds.iter().filter(|b| HubCommand::from_byte(**b).is_some()).count();
            let out = hub.on_bytes(&cmds, 0.0);
            let frames = FrameDecoder::new().push(&out);
            prop_assert_eq!(frames.len(), valid);
            prop_assert!(frames.iter().all(|f| f.is_ok()));
        }
    }
}
