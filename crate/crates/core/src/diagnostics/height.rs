//! Height from operator-marked points on a photo with a ruler in frame.

use serde::{Deserialize, Serialize};

use super::DiagnosticsError;

/// Ruler marks closer than this are treated as a mis-tap.
pub const MIN_RULER_PX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub x: f64,
    pub y: f64,
}

impl Pixel {
    pub const fn new(x: f64, y: f64) -> Self {
        Pixel { x, y }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightInput {
    pub ruler_top: Pixel,
    pub ruler_bottom: Pixel,
    pub head: Pixel,
    pub foot: Pixel,
    /// Physical ruler length, meters.
    pub ruler_len: f64,
}

impl HeightInput {
    pub fn body_px(&self) -> f64 {
        self.head.distance(&self.foot)
    }

    pub fn ruler_px(&self) -> f64 {
        self.ruler_top.distance(&self.ruler_bottom)
    }
}

pub fn height_from_pixels(input: &HeightInput) -> Result<f64, DiagnosticsError> {
    let n_r = input.ruler_px();
    if !(n_r >= MIN_RULER_PX) {
        return Err(DiagnosticsError::DegenerateRuler(n_r));
    }
    let n_b = input.body_px();
    if n_b == 0.0 {
        return Err(DiagnosticsError::DegenerateBody);
    }
    if !(input.ruler_len > 0.0) {
        return Err(DiagnosticsError::InvalidCalibration("ruler length must be positive"));
    }
    Ok(n_b / n_r * input.ruler_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upright(body_px: f64, ruler_px: f64, ruler_len: f64) -> HeightInput {
        HeightInput {
            ruler_top: Pixel::new(100.0, 200.0),
            ruler_bottom: Pixel::new(100.0, 200.0 + ruler_px),
            head: Pixel::new(300.0, 50.0),
            foot: Pixel::new(300.0, 50.0 + body_px),
            ruler_len,
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(height_from_pixels(&upright(250.0, 250.0, 0.3)).unwrap(), 0.3);
        assert!((height_from_pixels(&upright(600.0, 200.0, 0.5)).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn euclidean_distance_on_tilted_marks() {
        let mut input = upright(600.0, 200.0, 0.5);
        input.foot = Pixel::new(300.0 + 360.0, 50.0 + 480.0);
        assert!((height_from_pixels(&input).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_marks() {
        assert!(matches!(height_from_pixels(&upright(600.0, 9.0, 0.5)), Err(DiagnosticsError::DegenerateRuler(_))));
        assert_eq!(height_from_pixels(&upright(0.0, 200.0, 0.5)), Err(DiagnosticsError::DegenerateBody));
    }
}
