//! Encode commands and replies, decode a stream that arrives in pieces,
//! then push a damaged stream through the same decoder.

use umphcs::wireproto::{
    apply_faults, encode_command, encode_response, FaultProfile, FrameDecoder, HubCommand, HubResponse,
};

fn main() {
    println!("command bytes: S={:?} F={:?}", encode_command(HubCommand::SampleRaw), encode_command(HubCommand::SampleFiltered));

    let mut wire = Vec::new();
    for code in [0u16, 41, 512, 1023] {
        wire.extend(encode_response(HubResponse::AdcValue(code)));
    }
    wire.extend(encode_response(HubResponse::HubError));
    println!("reply stream: {:?}", String::from_utf8_lossy(&wire));

    // Feed it three bytes at a time, as a serial port might.
    let mut dec = FrameDecoder::new();
    for chunk in wire.chunks(3) {
        for frame in dec.push(chunk) {
            println!("  {frame:?}");
        }
    }

    let mut clean = Vec::new();
    for i in 0..2000u16 {
        clean.extend(encode_response(HubResponse::AdcValue(i % 1024)));
    }
    let profile = FaultProfile { drop_prob: 0.02, corrupt_prob: 0.02, seed: 7, latency_ms: 0.0 };
    let damaged = apply_faults(&profile, &clean);
    let (mut ok, mut bad) = (0, 0);
    for frame in FrameDecoder::new().push(&damaged) {
        match frame {
            Ok(_) => ok += 1,
            Err(_) => bad += 1,
        }
    }
    println!("2000 frames at 2% drop / 2% corrupt: {ok} decoded, {bad} malformed, {} bytes lost", clean.len() - damaged.len());
}
