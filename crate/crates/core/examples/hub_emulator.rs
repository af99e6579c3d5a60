//! Attach a thermometer module to the emulated hub, poll it over wired and
//! Bluetooth links, and watch the safety cutoff refuse a sample.

use umphcs::biosim::Lm35Module;
use umphcs::diagnostics::{temperature_from_code, TemperatureCalib};
use umphcs::hubsim::{Hub, HubAction};
use umphcs::session::{Attempt, HubLink};
use umphcs::wireproto::{EmulatedLink, HubCommand, LinkConfig};

fn main() {
    for link in [LinkConfig::wired(), LinkConfig::bluetooth(2.0)] {
        let hub = Hub::with_module(Box::new(Lm35Module::new(37.2).unwrap()));
        let mut host = HubLink::new(EmulatedLink::new(hub, link.clone()));
        let mut codes = Vec::new();
        for _ in 0..5 {
            if let Attempt::Value(code) = host.request(HubCommand::SampleRaw) {
                codes.push(code);
            }
        }
        let c = temperature_from_code(codes[0], &TemperatureCalib::default()).unwrap();
        println!("{:?}: codes {codes:?} -> {:.2} °C after {:.1} ms", link.kind, c.celsius, host.now_ms());
    }

    let mut hub = Hub::with_module(Box::new(Lm35Module::new(37.2).unwrap()));
    hub.state.configure(HubAction::SafetyOff).unwrap();
    let mut host = HubLink::new(EmulatedLink::new(hub, LinkConfig::wired()));
    println!("cutoff open: {:?}", host.request(HubCommand::SampleRaw));
}
