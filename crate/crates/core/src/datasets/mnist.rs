//! IDX files as published with MNIST.
//!
//! All integers are big-endian. Image files carry magic `0x00000803`, then
//! the image count, row count and column count, then one unsigned byte per
//! pixel. Label files carry magic `0x00000801` and the label count, then one
//! byte per label. Pixels are scaled to `[0, 1]` by dividing by 255.

use std::fs;
use std::path::Path;

use super::{Dataset, Inputs};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], words: usize, what: &str) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::format(
            format!("{what}.header"),
            format!("file has {} bytes, header needs {}", bytes.len(), 4 * words),
        ));
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|w| u32::from_be_bytes([w[0], w[1], w[2], w[3]]))
        .collect())
}

/// Returns `(rows, cols, pixels)` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let h = header(bytes, 4, "images")?;
    if h[0] != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images.magic",
            format!("expected {IDX_IMAGES_MAGIC:#010x}, found {:#010x}", h[0]),
        ));
    }
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    if rows == 0 || cols == 0 {
        return Err(Error::format("images.dimensions", format!("{rows}x{cols}")));
    }
    let body = &bytes[16..];
    let need = count * rows * cols;
    if body.len() != need {
        return Err(Error::format(
            "images.count",
            format!("header declares {count} images of {rows}x{cols} ({need} bytes), body has {} bytes", body.len()),
        ));
    }
    Ok((rows, cols, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let h = header(bytes, 2, "labels")?;
    if h[0] != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels.magic",
            format!("expected {IDX_LABELS_MAGIC:#010x}, found {:#010x}", h[0]),
        ));
    }
    let count = h[1] as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(
            "labels.count",
            format!("header declares {count} labels, body has {} bytes", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Loads an image file and its label file into a 10-class dataset of
/// `[rows, cols, 1]` samples.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (rows, cols, pixels) = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    let n = pixels.len() / (rows * cols);
    if labels.len() != n {
        return Err(Error::format(
            "labels.count",
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::format("labels.value", format!("label {bad} is not a digit")));
    }
    Dataset::new(
        Inputs::new(vec![rows, cols, 1], pixels)?,
        labels.into_iter().map(usize::from).collect(),
        10,
    )
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows == 0 || cols == 0 || !pixels.len().is_multiple_of(rows * cols) {
        return Err(Error::Dimension(format!("{} bytes are not {rows}x{cols} images", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IDX_IMAGES_MAGIC, (pixels.len() / (rows * cols)) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
