//! Spectacle power across the slide range for both lens pairs.

use umphcs::diagnostics::{eye_power, eye_power_trace, LensBench};

fn main() {
    let hyper = LensBench::default();
    let myo = LensBench::myopia();
    println!(" d (cm) | +5/-2 (D) | -5/+2 (D)");
    for i in 0..13 {
        let d = 0.015 + 0.005 * f64::from(i);
        println!("{:7.1} | {:9.6} | {:9.6}", d * 100.0, eye_power(d, &hyper), eye_power(d, &myo));
    }
    let t = eye_power_trace(0.02, &hyper).unwrap();
    println!("\nstep by step at 2 cm: {t:#?}");
}
