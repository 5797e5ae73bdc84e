//! Class-probability grids over the input plane of 2-D models.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{Inputs, RED};
use crate::error::{Error, Result};
use crate::mc::predict_pool;
use crate::models::Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl FromStr for Bounds {
    type Err = Error;

    /// `x_min,x_max,y_min,y_max`
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parameter(format!("bounds {s:?}: {e}")))?;
        let [x_min, x_max, y_min, y_max] = v[..] else {
            return Err(Error::Parameter(format!("bounds {s:?}: expected x_min,x_max,y_min,y_max")));
        };
        if !(x_min <= x_max && y_min <= y_max) {
            return Err(Error::Parameter(format!("bounds {s:?} are empty")));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub p_red: f64,
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Eval-mode red-class probability at `resolution = (nx, ny)` points
/// spanning `bounds` edge to edge, `y` outer and `x` inner.
pub fn export_decision_grid(model: &Model<f32>, bounds: Bounds, resolution: (usize, usize)) -> Result<Vec<GridPoint>> {
    if model.spec().input_shape != [2] {
        return Err(Error::Config(format!(
            "decision grids need a 2-D input model, got input shape {:?}",
            model.spec().input_shape
        )));
    }
    let (nx, ny) = resolution;
    if nx == 0 || ny == 0 {
        return Err(Error::Parameter("grid resolution must be at least 1×1".into()));
    }
    let xs = axis(bounds.x_min, bounds.x_max, nx);
    let ys = axis(bounds.y_min, bounds.y_max, ny);
    let coords: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let inputs = Inputs::new(vec![2], coords.iter().flat_map(|&(x, y)| [x as f32, y as f32]).collect())?;
    let ids: Vec<usize> = (0..coords.len()).collect();
    let dists = predict_pool(model, &inputs, &ids)?;
    Ok(coords
        .iter()
        .zip(&dists)
        .map(|(&(x, y), d)| GridPoint {
            x,
            y,
            p_red: d.probs()[RED],
        })
        .collect())
}

/// Writes `x,y,p_red` rows with a header.
pub fn write_decision_grid(points: &[GridPoint], path: &Path) -> Result<()> {
    let mut text = String::from("x,y,p_red\n");
    for p in points {
        let _ = writeln!(text, "{},{},{}", p.x, p.y, p.p_red);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
