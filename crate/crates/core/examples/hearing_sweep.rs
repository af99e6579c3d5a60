//! Sweep a simulated listener with a high-frequency loss and print the
//! audiogram, then drive the same state machine by hand.

use std::collections::BTreeMap;

use umphcs::biosim::HearingProfile;
use umphcs::diagnostics::{audiogram, hearing_step, HearingEvent, HearingState};
use umphcs::session::{run_hearing, DEFAULT_HEARING_TIMEOUT_S};

fn main() {
    let profile = HearingProfile {
        threshold_db: BTreeMap::from([(250, 10.0), (500, 12.0), (1000, 20.0), (2000, 35.0), (4000, 62.0), (8000, 90.0)]),
    };
    let out = run_hearing(&profile, DEFAULT_HEARING_TIMEOUT_S).unwrap();
    println!("{} tones, {:.0} s simulated", out.steps, out.elapsed_s);
    print!("{}", out.audiogram.render_text());

    // A listener who only ever hears the third tone at each frequency.
    let mut state = HearingState::new();
    let mut n = 0;
    while !state.finished() {
        n += 1;
        let event = if n % 3 == 0 { HearingEvent::Heard } else { HearingEvent::Timeout };
        if event == HearingEvent::Heard {
            n = 0;
        }
        state = hearing_step(state, event).unwrap();
    }
    println!("{}", serde_json::to_string(&audiogram(&state).unwrap()).unwrap());
}
