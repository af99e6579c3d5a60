//! Two-lens refraction tube: spectacle power from lens separation.

use serde::{Deserialize, Serialize};

use super::DiagnosticsError;

/// Lens powers and geometry of the tube.
///
/// `p1` is the eyepiece lens, `p2` the lens on the slide pot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensBench {
    pub p1: f64,
    pub p2: f64,
    /// Eye to eyepiece, meters.
    pub eye_to_eyepiece: f64,
    /// Eye to spectacle plane, meters.
    pub spectacle_distance: f64,
}

impl Default for LensBench {
    fn default() -> Self {
        LensBench { p1: -2.0, p2: 5.0, eye_to_eyepiece: 0.03, spectacle_distance: 0.015 }
    }
}

impl LensBench {
    /// The mirrored pair for myopic patients.
    pub fn myopia() -> Self {
        LensBench { p1: 2.0, p2: -5.0, ..Self::default() }
    }

    pub fn is_valid(&self) -> bool {
        self.eye_to_eyepiece > 0.0
            && self.spectacle_distance > 0.0
            && [self.p1, self.p2, self.eye_to_eyepiece, self.spectacle_distance].iter().all(|x| x.is_finite())
    }

    /// Rate of change of spectacle power with lens separation, D/m.
    pub fn slope(&self) -> f64 {
        self.p2 * (1.0 + self.eye_to_eyepiece * self.p1) / self.spectacle_distance
    }
}

/// Spectacle power for lens separation `d`, in closed form.
pub fn eye_power(d: f64, bench: &LensBench) -> f64 {
    let LensBench { p1, p2, eye_to_eyepiece: l, spectacle_distance: big_l } = *bench;
    (d * p2 - l * p1 - l * p2 + l * d * p1 * p2) / big_l
}

/// Intermediate quantities of the stepwise derivation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyePowerTrace {
    pub d: f64,
    /// Equivalent focal length of the lens pair.
    pub f_equiv: f64,
    /// Position of the equivalent lens.
    pub alpha: f64,
    /// Focal length of the matching spectacle lens; infinite at zero power.
    pub f_spectacle: f64,
    pub power: f64,
}

const POLE_EPS: f64 = 1e-9;

/// Step through equivalent focal length, equivalent-lens position and the
/// transfer to the spectacle plane.
///
/// The eye sits behind the eyepiece, so its signed offset from the
/// equivalent-lens reference is `-eye_to_eyepiece`.
pub fn eye_power_trace(d: f64, bench: &LensBench) -> Result<EyePowerTrace, DiagnosticsError> {
    let LensBench { p1, p2, eye_to_eyepiece, spectacle_distance } = *bench;
    // Work in powers so zero-power lenses stay finite; the pole test is the
    // focal-length form f1 + f2 - d.
    let combined = p1 + p2 - d * p1 * p2;
    if p1 != 0.0 && p2 != 0.0 {
        let gap = 1.0 / p1 + 1.0 / p2 - d;
        if gap.abs() < POLE_EPS {
            return Err(DiagnosticsError::DegenerateLensSystem(gap));
        }
    }
    if combined == 0.0 || p2 == 0.0 {
        return Err(DiagnosticsError::DegenerateLensSystem(f64::INFINITY));
    }
    let f_equiv = 1.0 / combined;
    let f2 = 1.0 / p2;
    let alpha = f_equiv * d / f2;
    let offset = -eye_to_eyepiece + alpha;
    let power = offset / (f_equiv * spectacle_distance);
    let f_spectacle = if offset == 0.0 { f64::INFINITY } else { f_equiv * spectacle_distance / offset };
    Ok(EyePowerTrace { d, f_equiv, alpha, f_spectacle, power })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_examples() {
        let hyper = LensBench::default();
        assert!((eye_power(0.015, &hyper) + 1.3).abs() < 1e-12);
        assert!((eye_power(0.075, &hyper) - 17.5).abs() < 1e-12);
        assert!((eye_power(0.03, &LensBench::myopia()) + 4.6).abs() < 1e-12);
        let none = LensBench { p1: 0.0, p2: 0.0, ..hyper };
        assert_eq!(eye_power(0.04, &none), 0.0);
    }

    #[test]
    fn trace_matches_table_row() {
        let t = eye_power_trace(0.02, &LensBench::default()).unwrap();
        assert!((t.power - 0.266667).abs() < 1e-6);
        assert!((t.power - eye_power(0.02, &LensBench::default())).abs() < 1e-12);
        assert!((t.power - 1.0 / t.f_spectacle).abs() < 1e-12);
        // F' = f1·f2 / (f1 + f2 - d) with f1 = -0.5, f2 = 0.2.
        assert!((t.f_equiv - (-0.5 * 0.2) / (-0.5 + 0.2 - 0.02)).abs() < 1e-15);
        assert!((t.alpha - t.f_equiv * 0.02 / 0.2).abs() < 1e-15);
    }

    #[test]
    fn pole_is_degenerate() {
        // f1 + f2 = 0.04 + 0.02 sits inside the pot travel.
        let bench = LensBench { p1: 25.0, p2: 50.0, ..LensBench::default() };
        assert!(matches!(eye_power_trace(0.06, &bench), Err(DiagnosticsError::DegenerateLensSystem(_))));
        let hyper = LensBench::default();
        assert!(matches!(eye_power_trace(-0.3, &hyper), Err(DiagnosticsError::DegenerateLensSystem(_))));
    }

    #[test]
    fn affine_in_separation() {
        let b = LensBench::default();
        let slope = (eye_power(0.06, &b) - eye_power(0.02, &b)) / 0.04;
        assert!((slope - b.slope()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn trace_equals_closed_form(
            d in 0.015f64..0.075,
            p1 in -10.0f64..10.0,
            p2 in prop_oneof![-10.0f64..-0.5, 0.5f64..10.0],
            l in 0.01f64..0.05,
            big_l in 0.005f64..0.03,
        ) {
            let bench = LensBench { p1, p2, eye_to_eyepiece: l, spectacle_distance: big_l };
            if let Ok(t) = eye_power_trace(d, &bench) {
                let closed = eye_power(d, &bench);
                let scale = closed.abs().max(t.power.abs());
                prop_assert!((t.power - closed).abs() <= 1e-12 * scale.max(1e-300), "{} vs {}", t.power, closed);
            }
        }

        #[test]
        fn monotone_between_travel_ends(d in 0.015f64..0.075) {
            let b = LensBench::default();
            let (lo, hi) = (eye_power(0.015, &b), eye_power(0.075, &b));
            let p = eye_power(d, &b);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }
}
