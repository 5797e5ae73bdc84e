//! The two interleaved crescent distributions of the toy problem.
//!
//! Both classes share one polar draw, `r ~ N(1, 1/16)` and `φ ~ N(1/2, 1/9)`:
//!
//! ```text
//! red  = ( 1/3, -1/10) + r·(cos φ,  sin φ)
//! blue = (-1/3,  1/10) + r·(cos φ, -sin φ)
//! ```
//!
//! Negative radii are kept as drawn.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::{Dataset, Inputs};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const RED: usize = 0;
pub const BLUE: usize = 1;

const RED_CENTER: [f64; 2] = [1.0 / 3.0, -0.1];
const BLUE_CENTER: [f64; 2] = [-1.0 / 3.0, 0.1];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YinYangSample {
    pub point: [f64; 2],
    pub class: usize,
}

/// `n_per_class` red samples followed by `n_per_class` blue samples.
pub fn generate_yinyang(n_per_class: usize, rng: &mut Rng) -> Result<Vec<YinYangSample>> {
    if n_per_class == 0 {
        return Err(Error::Parameter("n_per_class must be at least 1".into()));
    }
    let radius = Normal::new(1.0, 0.25).expect("valid normal");
    let angle = Normal::new(0.5, 1.0 / 3.0).expect("valid normal");
    let mut out = Vec::with_capacity(2 * n_per_class);
    for class in [RED, BLUE] {
        for _ in 0..n_per_class {
            let r: f64 = radius.sample(rng);
            let phi: f64 = angle.sample(rng);
            let point = if class == RED {
                [RED_CENTER[0] + r * phi.cos(), RED_CENTER[1] + r * phi.sin()]
            } else {
                [BLUE_CENTER[0] + r * phi.cos(), BLUE_CENTER[1] - r * phi.sin()]
            };
            out.push(YinYangSample { point, class });
        }
    }
    Ok(out)
}

impl YinYangSample {
    pub fn to_dataset(samples: &[YinYangSample]) -> Result<Dataset> {
        let data = samples.iter().flat_map(|s| s.point.map(|v| v as f32)).collect();
        Dataset::new(Inputs::new(vec![2], data)?, samples.iter().map(|s| s.class).collect(), 2)
    }
}

/// Writes `x,y,class` rows with a header.
pub fn write_yinyang_csv(samples: &[YinYangSample], path: &Path) -> Result<()> {
    let mut text = String::from("x,y,class\n");
    for s in samples {
        let _ = writeln!(text, "{},{},{}", s.point[0], s.point[1], s.class);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
