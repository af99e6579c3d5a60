//! Height from four marked pixels: the ruler's ends and the person's.

use umphcs::diagnostics::{height_from_pixels, HeightInput, Pixel};

fn main() {
    let input = HeightInput {
        ruler_top: Pixel::new(412.0, 118.0),
        ruler_bottom: Pixel::new(415.0, 742.0),
        head: Pixel::new(230.0, 96.0),
        foot: Pixel::new(236.0, 1170.0),
        ruler_len: 1.0,
    };
    println!("ruler {:.1} px, body {:.1} px", input.ruler_px(), input.body_px());
    println!("height {:.3} m", height_from_pixels(&input).unwrap());

    let short = HeightInput { ruler_bottom: Pixel::new(412.0, 120.0), ..input };
    println!("two-pixel ruler: {}", height_from_pixels(&short).unwrap_err());
}
