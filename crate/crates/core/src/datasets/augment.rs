//! Small random rotations and axis scalings of ground-truth images.
//!
//! The transform is taken about the canvas center, so digits stay centered.
//! Output pixels are bilinear samples of the inverse-mapped source position;
//! positions outside the source read as zero, and results are clipped to
//! `[0, 1]`.

use rand::Rng as _;

use crate::rng::Rng;

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_SCALE_DEVIATION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub scale_y: f64,
    pub scale_x: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        angle_deg: 0.0,
        scale_y: 1.0,
        scale_x: 1.0,
    };

    pub fn draw(rng: &mut Rng) -> Self {
        let s = MAX_SCALE_DEVIATION;
        Self {
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..MAX_ROTATION_DEG),
            scale_y: rng.random_range(1.0 - s..=1.0 + s),
            scale_x: rng.random_range(1.0 - s..=1.0 + s),
        }
    }
}

/// Augments an `[h, w, c]` image with freshly drawn parameters.
pub fn augment(image: &[f32], shape: [usize; 3], rng: &mut Rng) -> Vec<f32> {
    augment_with(image, shape, AugmentParams::draw(rng))
}

pub fn augment_with(image: &[f32], shape: [usize; 3], p: AugmentParams) -> Vec<f32> {
    let [h, w, c] = shape;
    assert_eq!(image.len(), h * w * c, "image does not match shape {shape:?}");
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let at = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            image[(y as usize * w + x as usize) * c + ch] as f64
        }
    };
    let mut out = vec![0.0f32; image.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (cos * dx + sin * dy) / p.scale_x + cx;
            let sy = (-sin * dx + cos * dy) / p.scale_y + cy;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x0 + 1, ch))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0, ch) + fx * at(y0 + 1, x0 + 1, ch));
                out[(y * w + x) * c + ch] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}
