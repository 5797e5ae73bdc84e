//! Monte-Carlo dropout inference.
//!
//! A prediction `ỹ` is the mean of `passes` stochastic forward passes. Its
//! normalized entropy `H(ỹ) = -(1/ln C) Σ p log p` lies in `[0, 1]`; the
//! pseudo-label is its argmax. The ground-truth threshold `θ` is the mean
//! entropy over the labeled pool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Inputs;
use crate::error::{Error, Result};
use crate::models::{Mode, Model};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples per stochastic batch when sweeping a pool.
pub const POOL_CHUNK: usize = 256;

/// Tolerance on the sum of a distribution.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Parameter("a distribution needs at least one class".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Parameter(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Parameter(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, class: usize) -> Self {
        let mut p = vec![0.0; classes];
        p[class] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.0)
    }

    pub fn pseudo_label(&self) -> usize {
        pseudo_label(&self.0)
    }
}

/// Normalized Shannon entropy, `0·log 0 = 0`. Zero for a single class.
pub fn entropy(probs: &[f64]) -> f64 {
    if probs.len() < 2 {
        return 0.0;
    }
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    (h / (probs.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Index of the largest probability; the lowest index wins ties.
pub fn pseudo_label(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// `-ln p[target]`, the per-sample classification loss on probabilities.
pub fn cross_entropy(probs: &[f64], target: usize) -> f64 {
    -probs[target].ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    /// `T′`, passes over unlabeled samples.
    pub passes_unlabeled: usize,
    /// `T`, passes over labeled samples for the threshold.
    pub passes_labeled: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            passes_unlabeled: 10,
            passes_labeled: 100,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes_unlabeled == 0 || self.passes_labeled == 0 {
            return Err(Error::Config("MC pass counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything that maps a batch to class probabilities, with or without
/// dropout.
pub trait Predictor: Sync {
    fn classes(&self) -> usize;

    /// `[n, C]` probabilities for a `[n, ..]` batch.
    fn predict(&self, batch: &Tensor<f32>, stochastic: bool, rng: &mut Rng) -> Result<Tensor<f32>>;
}

impl Predictor for Model<f32> {
    fn classes(&self) -> usize {
        self.num_classes()
    }

    fn predict(&self, batch: &Tensor<f32>, stochastic: bool, rng: &mut Rng) -> Result<Tensor<f32>> {
        self.forward(batch, if stochastic { Mode::Mc } else { Mode::Eval }, rng)
    }
}

/// Mean of `passes` stochastic predictions for every row of `batch`,
/// accumulated in pass order.
pub fn mc_average(
    model: &impl Predictor,
    batch: &Tensor<f32>,
    passes: usize,
    rng: &mut Rng,
) -> Result<Vec<ClassDistribution>> {
    if passes == 0 {
        return Err(Error::Parameter("passes must be at least 1".into()));
    }
    let c = model.classes();
    let mut sum: Vec<f64> = Vec::new();
    for _ in 0..passes {
        let p = model.predict(batch, true, rng)?;
        if sum.is_empty() {
            sum = vec![0.0; p.len()];
        }
        for (s, &v) in sum.iter_mut().zip(p.data()) {
            *s += v as f64;
        }
    }
    let scale = 1.0 / passes as f64;
    Ok(sum
        .chunks_exact(c)
        .map(|row| ClassDistribution(row.iter().map(|v| v * scale).collect()))
        .collect())
}

/// [`mc_average`] over the samples `ids` of `inputs`, in chunks of
/// [`POOL_CHUNK`]. Chunk `k` draws from `rng.stream(k)`, so the result does
/// not depend on how chunks are scheduled across threads.
pub fn mc_pool(
    model: &impl Predictor,
    inputs: &Inputs,
    ids: &[usize],
    passes: usize,
    rng: &Rng,
) -> Result<Vec<ClassDistribution>> {
    let chunks: Vec<Result<Vec<ClassDistribution>>> = ids
        .par_chunks(POOL_CHUNK)
        .enumerate()
        .map(|(k, chunk)| {
            let batch = inputs.batch(chunk)?;
            mc_average(model, &batch, passes, &mut rng.stream(k as u64))
        })
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Dropout-free predictions for `ids`.
pub fn predict_pool(model: &impl Predictor, inputs: &Inputs, ids: &[usize]) -> Result<Vec<ClassDistribution>> {
    let chunks: Vec<Result<Vec<ClassDistribution>>> = ids
        .par_chunks(POOL_CHUNK)
        .map(|chunk| {
            let batch = inputs.batch(chunk)?;
            let p = model.predict(&batch, false, &mut Rng::from_seed(0))?;
            Ok(p.data()
                .chunks_exact(model.classes())
                .map(|row| ClassDistribution(row.iter().map(|&v| v as f64).collect()))
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// `θ`: mean entropy of `T`-pass predictions over the labeled samples.
pub fn ground_truth_threshold(
    model: &impl Predictor,
    inputs: &Inputs,
    labeled: &[usize],
    cfg: &McConfig,
    rng: &Rng,
) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::Parameter("the threshold needs at least one labeled sample".into()));
    }
    let dists = mc_pool(model, inputs, labeled, cfg.passes_labeled, rng)?;
    Ok(dists.iter().map(ClassDistribution::entropy).sum::<f64>() / dists.len() as f64)
}
