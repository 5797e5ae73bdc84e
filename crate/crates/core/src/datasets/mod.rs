//! Sample storage, the two data sources and the labeled/unlabeled split.
//!
//! Class labels are 0-based everywhere in the crate: Yin-Yang red is class 0
//! and blue class 1, and an MNIST digit is its own class index.

mod augment;
mod mnist;
mod pools;
mod yinyang;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, AugmentParams, MAX_ROTATION_DEG, MAX_SCALE_DEVIATION};
pub use mnist::{
    load_mnist_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use pools::{make_pools, DataPools, HiddenTruth, LabelSource, LabeledEntry};
pub use yinyang::{generate_yinyang, write_yinyang_csv, YinYangSample, BLUE, RED};

/// Fixed-size samples stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    sample_shape: Vec<usize>,
    width: usize,
    data: Vec<f32>,
}

impl Inputs {
    pub fn new(sample_shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let width: usize = sample_shape.iter().product();
        if width == 0 {
            return Err(Error::Dimension(format!("sample shape {sample_shape:?} is empty")));
        }
        if !data.len().is_multiple_of(width) {
            return Err(Error::Dimension(format!(
                "{} values do not split into samples of shape {sample_shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            sample_shape,
            width,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    /// Values per sample.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Stacks the given samples into a `[n, ..sample_shape]` tensor.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(ids.len() * self.width);
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Lookup(format!("sample {i} out of {} samples", self.len())));
            }
            data.extend_from_slice(self.get(i));
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data)
    }

    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let t = self.batch(ids)?;
        Ok(Self {
            sample_shape: self.sample_shape.clone(),
            width: self.width,
            data: t.into_data(),
        })
    }
}

/// Inputs with ground-truth classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Arc<Inputs>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Inputs, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Parameter(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            inputs: Arc::new(inputs),
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let labels = ids
            .iter()
            .map(|&i| self.labels.get(i).copied().ok_or_else(|| Error::Lookup(format!("sample {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.inputs.select(ids)?, labels, self.classes)
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &c in &self.labels {
            counts[c] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_stacks_samples() {
        let x = Inputs::new(vec![2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(x.len(), 3);
        let b = x.batch(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 2]);
        assert_eq!(b.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(x.batch(&[3]).is_err());
    }

    #[test]
    fn ragged_data_is_rejected() {
        assert!(Inputs::new(vec![3], vec![0.0; 4]).is_err());
        let x = Inputs::new(vec![1], vec![0.0; 2]).unwrap();
        assert!(Dataset::new(x.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(x, vec![0, 2], 2).is_err());
    }
}
